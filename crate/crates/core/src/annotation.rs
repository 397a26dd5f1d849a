//! Region editing for ground-truth curation.
//!
//! A session owns a label map and applies split / merge / reclassify /
//! draw / erase edits while keeping every [`LabelMap`] invariant. Each
//! committed edit is logged for replay and snapshotted for undo.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Roi};
use crate::image_io::{self, GrayImage, Scale, SegMasks};
use crate::morphometry::{self, HexNeighbors, MorphoReport};
use crate::postprocess::{LabelMap, RegionClass};

pub const UNDO_DEPTH: usize = 64;

/// A pixel position; may lie outside the image (strokes are clipped).
pub type Point = (i64, i64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    Split { label: u32, polyline: Vec<Point> },
    Merge { a: u32, b: u32, #[serde(default)] force: bool },
    SetClass { label: u32, class: RegionClass },
    /// Paints a brush stroke into `label`, or into new regions of `class`
    /// when `label` is absent.
    Draw {
        class: RegionClass,
        #[serde(default)]
        label: Option<u32>,
        points: Vec<Point>,
        radius: u32,
    },
    Erase { points: Vec<Point>, radius: u32 },
}

/// What an edit did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Applied { changed_pixels: usize },
    /// The edit was valid but had no effect; nothing was recorded.
    Unchanged { warning: String },
}

/// 8-connected, 1-px rasterization of the segment `a`–`b`.
pub fn raster_line(a: Point, b: Point) -> Vec<Point> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Rasterized polyline without repeated points.
pub fn raster_polyline(points: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::new();
    match points {
        [] => {}
        [p] => out.push(*p),
        _ => {
            for seg in points.windows(2) {
                for p in raster_line(seg[0], seg[1]) {
                    if out.last() != Some(&p) {
                        out.push(p);
                    }
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    out.retain(|p| seen.insert(*p));
    out
}

fn in_grid(p: Point, w: usize, h: usize) -> Option<usize> {
    (p.0 >= 0 && p.1 >= 0 && (p.0 as usize) < w && (p.1 as usize) < h).then(|| p.1 as usize * w + p.0 as usize)
}

/// Pixels within `radius` of the stroke polyline.
fn brush(points: &[Point], radius: u32, w: usize, h: usize) -> BTreeSet<usize> {
    let r = radius as i64;
    let mut out = BTreeSet::new();
    for (cx, cy) in raster_polyline(points) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    if let Some(i) = in_grid((cx + dx, cy + dy), w, h) {
                        out.insert(i);
                    }
                }
            }
        }
    }
    out
}

/// 4-connected components of the pixels of `label`, largest first (ties by
/// first pixel).
fn components_of(labels: &Grid<u32>, label: u32) -> Vec<Vec<usize>> {
    let mut seen = BTreeSet::new();
    let mut comps = Vec::new();
    for (i, &l) in labels.as_slice().iter().enumerate() {
        if l != label || seen.contains(&i) {
            continue;
        }
        let mut comp = vec![i];
        seen.insert(i);
        let mut k = 0;
        while k < comp.len() {
            let p = comp[k];
            k += 1;
            for n in labels.neighbors4(p) {
                if labels.as_slice()[n] == label && seen.insert(n) {
                    comp.push(n);
                }
            }
        }
        comps.push(comp);
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

/// Editable state: the image, the roi it is analysed over, and its regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSession {
    #[serde(with = "image_serde")]
    image: GrayImage,
    roi: Roi,
    #[serde(with = "label_map_serde")]
    initial: LabelMap,
    #[serde(with = "label_map_serde")]
    map: LabelMap,
    /// Every committed edit since the initial state, in order.
    log: Vec<Edit>,
    /// Line pixels left by each split, so a merge of its pieces can put them back.
    #[serde(default)]
    cuts: Vec<Cut>,
    /// Previous maps, each with the number of cuts recorded at the time.
    #[serde(skip)]
    undo: VecDeque<(LabelMap, usize)>,
    dirty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Cut {
    pieces: Vec<u32>,
    pixels: Vec<usize>,
}

/// Starts a session from optional masks (e.g. an imported initial
/// segmentation); without masks the label map is empty.
pub fn begin_session(image: GrayImage, masks: Option<SegMasks>) -> Result<EditSession> {
    let (w, h) = (image.width(), image.height());
    match masks {
        Some(m) => {
            if m.width() != w || m.height() != h {
                return Err(Error::DimensionMismatch(format!(
                    "image {w}x{h} vs masks {}x{}",
                    m.width(),
                    m.height()
                )));
            }
            let map = LabelMap::from_masks(&m)?;
            Ok(EditSession::from_label_map(image, map, m.roi))
        }
        None => Ok(EditSession::from_label_map(image, LabelMap::empty(w, h), Roi::full(w, h))),
    }
}

impl EditSession {
    /// Session over an existing (validated) label map.
    pub fn from_label_map(image: GrayImage, map: LabelMap, roi: Roi) -> Self {
        EditSession {
            image,
            roi,
            initial: map.clone(),
            map,
            log: Vec::new(),
            cuts: Vec::new(),
            undo: VecDeque::new(),
            dirty: false,
        }
    }

    pub fn image(&self) -> &GrayImage {
        &self.image
    }

    pub fn roi(&self) -> Roi {
        self.roi
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.map
    }

    pub fn initial_map(&self) -> &LabelMap {
        &self.initial
    }

    pub fn edits(&self) -> &[Edit] {
        &self.log
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn undo_depth(&self) -> usize {
        self.undo.len()
    }

    pub fn masks(&self) -> Result<SegMasks> {
        self.map.to_masks(self.roi)
    }

    /// Applies an edit; on error or no-op the session is unchanged.
    pub fn apply(&mut self, edit: Edit) -> Result<Outcome> {
        let mut cut = None;
        let (labels, classes) = match &edit {
            Edit::Split { label, polyline } => {
                let (parts, c) = split(&self.map, *label, polyline)?;
                cut = c;
                parts
            }
            Edit::Merge { a, b, force } => {
                let from = self.cuts.iter().rev().find(|c| c.pieces.contains(a) && c.pieces.contains(b));
                merge(&self.map, *a, *b, *force, from.map(|c| c.pixels.as_slice()))?
            }
            Edit::SetClass { label, class } => set_class(&self.map, *label, *class)?,
            Edit::Draw { class, label, points, radius } => draw(&self.map, *class, *label, points, *radius)?,
            Edit::Erase { points, radius } => erase(&self.map, points, *radius),
        };
        let changed = labels
            .as_slice()
            .iter()
            .zip(self.map.labels().as_slice())
            .filter(|(a, b)| a != b)
            .count();
        if changed == 0 && &classes == self.map.classes() {
            let warning = match &edit {
                Edit::Split { .. } => "polyline does not disconnect the region",
                _ => "edit has no effect",
            };
            return Ok(Outcome::Unchanged { warning: warning.into() });
        }
        let next = LabelMap::from_parts_unchecked(labels, classes);
        debug_assert!(next.validate().is_ok(), "edit {edit:?} broke the label map: {:?}", next.validate());
        if self.undo.len() == UNDO_DEPTH {
            self.undo.pop_front();
        }
        self.undo.push_back((std::mem::replace(&mut self.map, next), self.cuts.len()));
        self.cuts.extend(cut);
        self.log.push(edit);
        self.dirty = true;
        Ok(Outcome::Applied { changed_pixels: changed })
    }

    pub fn split_region(&mut self, label: u32, polyline: &[Point]) -> Result<Outcome> {
        self.apply(Edit::Split { label, polyline: polyline.to_vec() })
    }

    pub fn merge_regions(&mut self, a: u32, b: u32, force: bool) -> Result<Outcome> {
        self.apply(Edit::Merge { a, b, force })
    }

    pub fn set_class(&mut self, label: u32, class: RegionClass) -> Result<Outcome> {
        self.apply(Edit::SetClass { label, class })
    }

    pub fn draw(&mut self, class: RegionClass, label: Option<u32>, points: &[Point], radius: u32) -> Result<Outcome> {
        self.apply(Edit::Draw { class, label, points: points.to_vec(), radius })
    }

    pub fn erase(&mut self, points: &[Point], radius: u32) -> Result<Outcome> {
        self.apply(Edit::Erase { points: points.to_vec(), radius })
    }

    /// Reverts the last committed edit.
    pub fn undo(&mut self) -> Result<()> {
        let (prev, cuts) = self.undo.pop_back().ok_or(Error::EmptyHistory)?;
        self.map = prev;
        self.cuts.truncate(cuts);
        self.log.pop();
        self.dirty = true;
        Ok(())
    }

    /// Replays the edit log from the initial state.
    pub fn replay(&self) -> Result<LabelMap> {
        let mut s = EditSession::from_label_map(self.image.clone(), self.initial.clone(), self.roi);
        for e in &self.log {
            s.apply(e.clone())?;
        }
        Ok(s.map)
    }

    pub fn live_report(&self, convention: HexNeighbors) -> Result<LiveReport> {
        live_report(&self.map, self.roi, self.image.scale, convention)
    }

    /// Writes the three-page export; an existing file is first renamed to
    /// `<name>.bak`. Returns the backup path if one was made.
    pub fn export(&mut self, path: impl AsRef<Path>) -> Result<Option<PathBuf>> {
        let path = path.as_ref();
        let backup = if path.exists() {
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(".bak");
            let bak = path.with_file_name(name);
            std::fs::rename(path, &bak)?;
            Some(bak)
        } else {
            None
        };
        image_io::save_three_page_mask(path, &self.image, &self.masks()?)?;
        self.dirty = false;
        Ok(backup)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Restores a saved session (the undo stack is not persisted).
    pub fn from_json(text: &str) -> Result<Self> {
        let s: EditSession = serde_json::from_str(text)?;
        if s.map.width() != s.image.width() || s.map.height() != s.image.height() {
            return Err(Error::DimensionMismatch("session label map does not match its image".into()));
        }
        Ok(s)
    }
}

/// Morphometry plus per-class region area ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveReport {
    #[serde(flatten)]
    pub report: MorphoReport,
    pub n_regions: usize,
    pub cell_areas: AreaStats,
    pub gutta_areas: AreaStats,
}

/// Region areas in um² (all regions of the class inside the roi).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AreaStats {
    pub count: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    /// Share of the analysed area, in percent.
    pub area_pct: f64,
}

pub fn live_report(map: &LabelMap, roi: Roi, scale: Scale, convention: HexNeighbors) -> Result<LiveReport> {
    let stats = morphometry::region_stats(map, roi, scale);
    let area_mm2 = morphometry::roi_area_mm2(roi, scale);
    let report = morphometry::compute_report(&stats, scale, area_mm2, convention)?;
    let px_um2 = scale.pixel_area_um2();
    let summarize = |class: RegionClass| {
        let areas: Vec<usize> = stats.iter().filter(|s| s.class == class).map(|s| s.area_px).collect();
        let total = areas.iter().sum::<usize>() as f64 * px_um2;
        AreaStats {
            count: areas.len(),
            min: areas.iter().min().map(|&a| a as f64 * px_um2),
            max: areas.iter().max().map(|&a| a as f64 * px_um2),
            mean: (!areas.is_empty()).then(|| total / areas.len() as f64),
            area_pct: if area_mm2 > 0.0 { total / (area_mm2 * 1e6) * 100.0 } else { 0.0 },
        }
    };
    Ok(LiveReport {
        report,
        n_regions: stats.len(),
        cell_areas: summarize(RegionClass::Cell),
        gutta_areas: summarize(RegionClass::Gutta),
    })
}

type Parts = (Grid<u32>, BTreeMap<u32, RegionClass>);

fn class_or_err(map: &LabelMap, label: u32) -> Result<RegionClass> {
    map.class_of(label).ok_or(Error::UnknownLabel(label))
}

fn next_free(classes: &BTreeMap<u32, RegionClass>) -> u32 {
    classes.keys().next_back().map_or(1, |&l| l + 1)
}

fn split(map: &LabelMap, label: u32, polyline: &[Point]) -> Result<(Parts, Option<Cut>)> {
    let class = class_or_err(map, label)?;
    if polyline.len() < 2 {
        return Err(Error::InvalidArgument("a split polyline needs at least two points".into()));
    }
    let (w, h) = (map.width(), map.height());
    let mut labels = map.labels().clone();
    let mut classes = map.classes().clone();
    let line: Vec<usize> = raster_polyline(polyline)
        .into_iter()
        .filter_map(|p| in_grid(p, w, h))
        .filter(|&i| labels.as_slice()[i] == label)
        .collect();
    for &i in &line {
        labels.as_mut_slice()[i] = 0;
    }
    let comps = components_of(&labels, label);
    if comps.len() < 2 {
        return Ok(((map.labels().clone(), classes), None));
    }
    classes.remove(&label);
    let mut fresh = next_free(map.classes());
    for comp in &comps {
        for &i in comp {
            labels.as_mut_slice()[i] = fresh;
        }
        classes.insert(fresh, class);
        fresh += 1;
    }
    // hand back cut pixels that border only one piece
    let pieces: BTreeSet<u32> = (fresh - comps.len() as u32..fresh).collect();
    let mut pending = line;
    loop {
        let before = pending.len();
        // one pixel at a time, so two hand-backs never make pieces touch
        pending.retain(|&i| {
            let touching: BTreeSet<u32> = labels
                .neighbors4(i)
                .map(|n| labels.as_slice()[n])
                .filter(|l| pieces.contains(l))
                .collect();
            if touching.len() == 1 {
                labels.as_mut_slice()[i] = *touching.first().expect("one piece");
                false
            } else {
                true
            }
        });
        if pending.len() == before {
            break;
        }
    }
    let cut = Cut { pieces: pieces.into_iter().collect(), pixels: pending };
    Ok(((labels, classes), Some(cut)))
}

/// True when `a` and `b` pixels touch or share a line pixel's 3×3 window.
fn adjacent(labels: &Grid<u32>, a: u32, b: u32) -> bool {
    let s = labels.as_slice();
    (0..s.len()).any(|i| match s[i] {
        0 => {
            let mut has = (false, false);
            for n in labels.neighbors8(i) {
                has.0 |= s[n] == a;
                has.1 |= s[n] == b;
            }
            has.0 && has.1
        }
        l if l == a => labels.neighbors8(i).any(|n| s[n] == b),
        _ => false,
    })
}

fn is_connected(labels: &Grid<u32>, label: u32) -> bool {
    components_of(labels, label).len() <= 1
}

/// Merges `b` into `a`. With `cut` (the line left by the split that made
/// them) exactly those pixels are restored; otherwise boundary pixels
/// between the two regions are.
fn merge(map: &LabelMap, a: u32, b: u32, force: bool, cut: Option<&[usize]>) -> Result<Parts> {
    let ca = class_or_err(map, a)?;
    let cb = class_or_err(map, b)?;
    if a == b {
        return Err(Error::InvalidArgument("cannot merge a region with itself".into()));
    }
    if ca != cb && !force {
        return Err(Error::CrossClassMerge(a, b));
    }
    if !adjacent(map.labels(), a, b) {
        return Err(Error::NotAdjacent(a, b));
    }
    let src = map.labels().as_slice();
    let mut labels = map.labels().map(|&l| if l == b { a } else { l });
    let mut classes = map.classes().clone();
    classes.remove(&b);
    let foreign = |l: u32| l != 0 && l != a && l != b && map.class_of(l) == Some(ca);
    // a forced merge recolours b; its pixels may now touch regions of class `ca`
    let mut clashed = false;
    if ca != cb {
        for i in 0..src.len() {
            if src[i] == b && map.labels().neighbors4(i).any(|n| foreign(src[n])) {
                labels.as_mut_slice()[i] = 0;
                clashed = true;
            }
        }
    }
    let restorable = |i: usize, loose: bool| {
        if src[i] != 0 {
            return false;
        }
        let four: Vec<u32> = map.labels().neighbors4(i).map(|n| src[n]).filter(|&l| l != 0).collect();
        if four.iter().any(|&l| foreign(l)) {
            return false;
        }
        if !loose {
            return four.contains(&a) && four.contains(&b) && four.iter().all(|&l| l == a || l == b);
        }
        let ns: Vec<u32> = map.labels().neighbors8(i).map(|n| src[n]).collect();
        ns.contains(&a) && ns.contains(&b)
    };
    if let Some(cut) = cut {
        let mut pending: Vec<usize> = cut
            .iter()
            .copied()
            .filter(|&i| src[i] == 0 && !map.labels().neighbors4(i).any(|n| foreign(src[n])))
            .collect();
        loop {
            let (grow, rest): (Vec<usize>, Vec<usize>) =
                pending.iter().partition(|&&i| labels.neighbors4(i).any(|n| labels.as_slice()[n] == a));
            if grow.is_empty() {
                break;
            }
            for i in grow {
                labels.as_mut_slice()[i] = a;
            }
            pending = rest;
        }
        if is_connected(&labels, a) {
            return Ok((labels, classes));
        }
    }
    for loose in [false, true] {
        for i in 0..src.len() {
            if restorable(i, loose) {
                labels.as_mut_slice()[i] = a;
            }
        }
        if is_connected(&labels, a) {
            return Ok((labels, classes));
        }
    }
    if clashed {
        split_components(&mut labels, &mut classes, &[a]);
        return Ok((labels, classes));
    }
    Err(Error::NotAdjacent(a, b))
}

fn set_class(map: &LabelMap, label: u32, class: RegionClass) -> Result<Parts> {
    let old = class_or_err(map, label)?;
    let mut labels = map.labels().clone();
    let mut classes = map.classes().clone();
    if old == class {
        return Ok((labels, classes));
    }
    classes.insert(label, class);
    // pixels now touching a region of the new class become boundary
    let s = map.labels().as_slice();
    let clash: Vec<usize> = (0..s.len())
        .filter(|&i| s[i] == label && map.labels().neighbors4(i).any(|n| s[n] != 0 && s[n] != label && map.class_of(s[n]) == Some(class)))
        .collect();
    for i in clash {
        labels.as_mut_slice()[i] = 0;
    }
    split_components(&mut labels, &mut classes, &[label]);
    Ok((labels, classes))
}

/// Gives every extra 4-component of the listed labels its own fresh label
/// (largest component keeps the original) and drops labels with no pixels.
fn split_components(labels: &mut Grid<u32>, classes: &mut BTreeMap<u32, RegionClass>, touched: &[u32]) {
    let mut fresh = next_free(classes);
    for &l in touched {
        let Some(&class) = classes.get(&l) else { continue };
        let comps = components_of(labels, l);
        if comps.is_empty() {
            classes.remove(&l);
            continue;
        }
        for comp in comps.iter().skip(1) {
            for &i in comp {
                labels.as_mut_slice()[i] = fresh;
            }
            classes.insert(fresh, class);
            fresh += 1;
        }
    }
}

fn draw(map: &LabelMap, class: RegionClass, target: Option<u32>, points: &[Point], radius: u32) -> Result<Parts> {
    if let Some(t) = target {
        let c = class_or_err(map, t)?;
        if c != class {
            return Err(Error::InvalidArgument(format!("region {t} is a {c:?}, not a {class:?}")));
        }
    }
    let (w, h) = (map.width(), map.height());
    let mut labels = map.labels().clone();
    let mut classes = map.classes().clone();
    let paint = target.unwrap_or_else(|| next_free(&classes));
    let s = map.labels().as_slice();
    // only unlabeled pixels are painted, and never next to another region of the class
    let painted: Vec<usize> = brush(points, radius, w, h)
        .into_iter()
        .filter(|&i| s[i] == 0)
        .filter(|&i| !map.labels().neighbors4(i).any(|n| s[n] != 0 && Some(s[n]) != target && map.class_of(s[n]) == Some(class)))
        .collect();
    if painted.is_empty() {
        return Ok((labels, classes));
    }
    for &i in &painted {
        labels.as_mut_slice()[i] = paint;
    }
    classes.insert(paint, class);
    match target {
        Some(t) => {
            // strokes not attached to the region are dropped
            for comp in components_of(&labels, t) {
                if !comp.iter().any(|&i| s[i] == t) {
                    for i in comp {
                        labels.as_mut_slice()[i] = 0;
                    }
                }
            }
        }
        None => split_components(&mut labels, &mut classes, &[paint]),
    }
    Ok((labels, classes))
}

fn erase(map: &LabelMap, points: &[Point], radius: u32) -> Parts {
    let (w, h) = (map.width(), map.height());
    let mut labels = map.labels().clone();
    let mut classes = map.classes().clone();
    let mut touched = BTreeSet::new();
    for i in brush(points, radius, w, h) {
        let l = labels.as_slice()[i];
        if l != 0 {
            touched.insert(l);
            labels.as_mut_slice()[i] = 0;
        }
    }
    split_components(&mut labels, &mut classes, &touched.into_iter().collect::<Vec<_>>());
    (labels, classes)
}

mod image_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        width: usize,
        height: usize,
        scale: Scale,
        pixels: Vec<f32>,
    }

    pub fn serialize<S: Serializer>(img: &GrayImage, s: S) -> std::result::Result<S::Ok, S::Error> {
        Repr {
            width: img.width(),
            height: img.height(),
            scale: img.scale,
            pixels: img.pixels.as_slice().to_vec(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<GrayImage, D::Error> {
        use serde::de::Error as _;
        let r = Repr::deserialize(d)?;
        let pixels = Grid::from_vec(r.width, r.height, r.pixels).map_err(D::Error::custom)?;
        Ok(GrayImage::new(pixels, r.scale))
    }
}

pub(crate) mod label_map_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        width: usize,
        height: usize,
        /// Run-length pairs `(label, count)` in raster order.
        runs: Vec<(u32, usize)>,
        classes: BTreeMap<String, RegionClass>,
    }

    pub fn serialize<S: Serializer>(map: &LabelMap, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut runs: Vec<(u32, usize)> = Vec::new();
        for &l in map.labels().as_slice() {
            match runs.last_mut() {
                Some((last, n)) if *last == l => *n += 1,
                _ => runs.push((l, 1)),
            }
        }
        Repr { width: map.width(), height: map.height(), runs, classes: map.classes_json() }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<LabelMap, D::Error> {
        use serde::de::Error as _;
        let r = Repr::deserialize(d)?;
        let mut values = Vec::with_capacity(r.width * r.height);
        for (l, n) in r.runs {
            values.extend(std::iter::repeat_n(l, n));
        }
        let labels = Grid::from_vec(r.width, r.height, values).map_err(D::Error::custom)?;
        let classes = r
            .classes
            .into_iter()
            .map(|(k, v)| k.parse::<u32>().map(|k| (k, v)))
            .collect::<std::result::Result<_, _>>()
            .map_err(D::Error::custom)?;
        LabelMap::new(labels, classes).map_err(D::Error::custom)
    }
}
