//! Conversion between cell/guttae masks and signed distance maps.
//!
//! The target field is `edt(cells) - edt(guttae)`: positive inside cells,
//! negative inside guttae and zero on background, in pixel units.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, Grid};
use crate::image_io::SegMasks;

const DUMP_MAGIC: &[u8; 8] = b"ENDOSDM\0";

/// Signed distance field over an image grid (pixel units).
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDistMap(Grid<f32>);

impl SignedDistMap {
    pub fn from_grid(grid: Grid<f32>) -> Self {
        SignedDistMap(grid)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        SignedDistMap(Grid::new(width, height))
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f32> {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn values(&self) -> &[f32] {
        self.0.as_slice()
    }

    /// Raw little-endian dump: 8-byte magic, u32 width, u32 height, then f32 values.
    pub fn write_dump(&self, mut out: impl Write) -> Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&(self.width() as u32).to_le_bytes())?;
        out.write_all(&(self.height() as u32).to_le_bytes())?;
        for v in self.values() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(mut input: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if &header[..8] != DUMP_MAGIC {
            return Err(Error::UnsupportedFormat("not a distance map dump".into()));
        }
        let w = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        let h = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
        let mut bytes = vec![0u8; w * h * 4];
        input.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(SignedDistMap(Grid::from_vec(w, h, values)?))
    }

    pub fn save_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_dump(std::io::BufWriter::new(file))
    }

    pub fn load_dump(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_dump(std::io::BufReader::new(file))
    }
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas rooted at the finite samples).
fn dt1d(f: &[f64], out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        let mut s = f64::NEG_INFINITY;
        while let Some(&v) = sites.last() {
            let vf = v as f64;
            s = ((fq + qf * qf) - (f[v] + vf * vf)) / (2.0 * (qf - vf));
            if s <= *bounds.last().expect("bounds track sites") {
                sites.pop();
                bounds.pop();
                s = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        sites.push(q);
        bounds.push(s);
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < sites.len() && bounds[k + 1] < qf {
            k += 1;
        }
        let d = qf - sites[k] as f64;
        *o = d * d + f[sites[k]];
    }
}

/// Exact squared Euclidean distance from every foreground pixel to the
/// nearest background pixel (zero on background).
///
/// Pixels outside the grid do not count as background, except for a grid
/// with no background at all, where distances are measured to the virtual
/// ring of pixels just outside the grid.
pub fn edt_squared(mask: &BinaryGrid) -> Grid<f64> {
    let (w, h) = mask.dims();
    if mask.count() == mask.len() {
        return Grid::from_fn(w, h, |x, y| {
            let d = (x + 1).min(y + 1).min(w - x).min(h - y) as f64;
            d * d
        });
    }
    let mut field: Vec<f64> = mask
        .as_slice()
        .iter()
        .map(|&fg| if fg { f64::INFINITY } else { 0.0 })
        .collect();
    let n = w.max(h);
    let mut column = vec![0.0; n];
    let mut result = vec![0.0; n];
    let mut sites = Vec::with_capacity(n);
    let mut bounds = Vec::with_capacity(n);

    for x in 0..w {
        for y in 0..h {
            column[y] = field[y * w + x];
        }
        dt1d(&column[..h], &mut result[..h], &mut sites, &mut bounds);
        for y in 0..h {
            field[y * w + x] = result[y];
        }
    }
    for y in 0..h {
        let row = &mut field[y * w..(y + 1) * w];
        column[..w].copy_from_slice(row);
        dt1d(&column[..w], &mut result[..w], &mut sites, &mut bounds);
        row.copy_from_slice(&result[..w]);
    }
    Grid::from_vec(w, h, field).expect("dimensions preserved")
}

/// Exact Euclidean distance transform in pixel units.
pub fn edt(mask: &BinaryGrid) -> Grid<f32> {
    edt_squared(mask).map(|&d| d.sqrt() as f32)
}

/// Signed distance map `edt(cells) - edt(guttae)`.
pub fn encode(masks: &SegMasks) -> Result<SignedDistMap> {
    if !masks.cells.same_dims(&masks.guttae) {
        return Err(Error::DimensionMismatch(
            "cell and guttae masks differ in size".into(),
        ));
    }
    let overlap = masks.cells.and_count(&masks.guttae);
    if overlap > 0 {
        return Err(Error::MaskOverlap { count: overlap });
    }
    let dc = edt_squared(&masks.cells);
    let dg = edt_squared(&masks.guttae);
    let values = dc
        .as_slice()
        .iter()
        .zip(dg.as_slice())
        .map(|(&c, &g)| (c.sqrt() - g.sqrt()) as f32)
        .collect();
    Ok(SignedDistMap(Grid::from_vec(
        masks.width(),
        masks.height(),
        values,
    )?))
}

/// Masks from the sign pattern: cells where positive, guttae where negative.
pub fn sign_masks(map: &SignedDistMap) -> SegMasks {
    let cells = map.grid().map(|&v| v > 0.0);
    let guttae = map.grid().map(|&v| v < 0.0);
    SegMasks::with_bbox_roi(cells, guttae).expect("sign sets are disjoint")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Roi;

    fn brute_force(mask: &BinaryGrid) -> Grid<f64> {
        let (w, h) = mask.dims();
        let bg: Vec<(i64, i64)> = (0..mask.len())
            .filter(|&i| !mask.as_slice()[i])
            .map(|i| ((i % w) as i64, (i / w) as i64))
            .collect();
        Grid::from_fn(w, h, |x, y| {
            if !*mask.get(x, y) {
                return 0.0;
            }
            bg.iter()
                .map(|&(bx, by)| (bx - x as i64).pow(2) + (by - y as i64).pow(2))
                .min()
                .map(|d| d as f64)
                .unwrap_or_else(|| ((x + 1).min(y + 1).min(w - x).min(h - y) as f64).powi(2))
        })
    }

    #[test]
    fn all_background_is_zero() {
        let m = Grid::filled(5, 4, false);
        assert!(edt(&m).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_is_one() {
        let m = Grid::from_fn(5, 5, |x, y| x == 2 && y == 3);
        let d = edt(&m);
        assert_eq!(*d.get(2, 3), 1.0);
        assert_eq!(d.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn all_foreground_uses_virtual_border() {
        let m = Grid::filled(5, 3, true);
        let d = edt_squared(&m);
        assert_eq!(*d.get(0, 0), 1.0);
        assert_eq!(*d.get(2, 1), 4.0);
        assert_eq!(d, brute_force(&m));
    }

    #[test]
    fn matches_brute_force_on_structured_masks() {
        let m = Grid::from_fn(23, 17, |x, y| (x * 7 + y * 3) % 11 != 0 && x != 5);
        assert_eq!(edt_squared(&m), brute_force(&m));
        let m = Grid::from_fn(9, 31, |x, y| !(x == 8 && y == 30));
        assert_eq!(edt_squared(&m), brute_force(&m));
    }

    #[test]
    fn encode_squares() {
        let cells = Grid::from_fn(20, 12, |x, y| (1..6).contains(&x) && (2..7).contains(&y));
        let guttae = Grid::from_fn(20, 12, |x, y| (10..15).contains(&x) && (4..9).contains(&y));
        let masks = SegMasks::with_bbox_roi(cells.clone(), guttae.clone()).unwrap();
        let map = encode(&masks).unwrap();
        let dc = brute_force(&cells);
        let dg = brute_force(&guttae);
        for i in 0..map.values().len() {
            let expect = dc.as_slice()[i].sqrt() - dg.as_slice()[i].sqrt();
            assert_eq!(map.values()[i], expect as f32);
        }
        assert_eq!(*map.grid().get(3, 4), 3.0);
        assert_eq!(*map.grid().get(12, 6), -3.0);
    }

    #[test]
    fn encode_cells_only_equals_edt() {
        let cells = Grid::from_fn(10, 10, |x, y| x > 2 && y < 7);
        let masks = SegMasks::with_bbox_roi(cells.clone(), Grid::filled(10, 10, false)).unwrap();
        assert_eq!(encode(&masks).unwrap().grid(), &edt(&cells));
        assert!(encode(&SegMasks::empty(4, 4))
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_overlap() {
        let a = Grid::filled(3, 3, true);
        let masks = SegMasks {
            cells: a.clone(),
            guttae: a,
            roi: Roi::full(3, 3),
        };
        assert!(matches!(encode(&masks), Err(Error::MaskOverlap { count: 9 })));
    }

    #[test]
    fn sign_masks_cases() {
        let zero = SignedDistMap::zeros(4, 4);
        let m = sign_masks(&zero);
        assert!(!m.cells.any() && !m.guttae.any());
        let neg = SignedDistMap::from_grid(Grid::filled(4, 4, -1.0));
        let m = sign_masks(&neg);
        assert_eq!(m.guttae.count(), 16);
        assert!(!m.cells.any());
    }

    #[test]
    fn dump_round_trip_and_bad_magic() {
        let map = SignedDistMap::from_grid(Grid::from_fn(3, 2, |x, y| x as f32 - y as f32 * 0.5));
        let mut buf = Vec::new();
        map.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert_eq!(SignedDistMap::read_dump(&buf[..]).unwrap(), map);
        buf[0] = b'X';
        assert!(SignedDistMap::read_dump(&buf[..]).is_err());
    }
}
