use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, compression::DeflateLevel, Compression, TiffEncoder};
use tiff::ColorType;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Every grayscale page of the file, in order. A single page holding two
/// interleaved gray+alpha samples is split into two pages.
pub(crate) fn read_pages(path: &Path) -> Result<Vec<Grid<f32>>> {
    let mut decoder = Decoder::new(BufReader::new(File::open(path)?))?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = decoder.dimensions()?;
        let (w, h) = (w as usize, h as usize);
        let color = decoder.colortype()?;
        let samples = match color {
            ColorType::Gray(8 | 16 | 32) => 1,
            ColorType::GrayA(8 | 16) => 2,
            ColorType::Multiband {
                bit_depth: 8 | 16,
                num_samples: 2,
            } => 2,
            other => {
                return Err(Error::UnsupportedBitDepth(format!(
                    "{other:?} (expected 8/16-bit integer or 32-bit float grayscale)"
                )))
            }
        };
        let values: Vec<f32> = match decoder.read_image()? {
            DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::F32(v) => v,
            _ => {
                return Err(Error::UnsupportedBitDepth(format!(
                    "{color:?} sample format"
                )))
            }
        };
        if values.len() != w * h * samples {
            return Err(Error::DimensionMismatch(format!(
                "page decoded to {} samples, expected {}",
                values.len(),
                w * h * samples
            )));
        }
        for channel in 0..samples {
            let plane: Vec<f32> = values.iter().skip(channel).step_by(samples).copied().collect();
            pages.push(Grid::from_vec(w, h, plane)?);
        }
        if !decoder.more_images() {
            break;
        }
        decoder.next_image()?;
    }
    Ok(pages)
}

enum PageKind {
    U8,
    U16,
    F32,
}

/// Narrowest lossless page type for the values.
fn page_kind(page: &Grid<f32>) -> PageKind {
    let integral = |max: f32| {
        page.as_slice()
            .iter()
            .all(|&v| v >= 0.0 && v <= max && v.fract() == 0.0)
    };
    if integral(255.0) {
        PageKind::U8
    } else if integral(65535.0) {
        PageKind::U16
    } else {
        PageKind::F32
    }
}

pub(crate) fn write_pages(path: &Path, pages: &[&Grid<f32>]) -> Result<()> {
    let mut encoder = TiffEncoder::new(BufWriter::new(File::create(path)?))?
        .with_compression(Compression::Deflate(DeflateLevel::Balanced));
    for page in pages {
        let (w, h) = (page.width() as u32, page.height() as u32);
        match page_kind(page) {
            PageKind::U8 => {
                let data: Vec<u8> = page.as_slice().iter().map(|&v| v as u8).collect();
                encoder.write_image::<colortype::Gray8>(w, h, &data)?;
            }
            PageKind::U16 => {
                let data: Vec<u16> = page.as_slice().iter().map(|&v| v as u16).collect();
                encoder.write_image::<colortype::Gray16>(w, h, &data)?;
            }
            PageKind::F32 => {
                encoder.write_image::<colortype::Gray32Float>(w, h, page.as_slice())?;
            }
        }
    }
    Ok(())
}

pub(crate) fn write_three_pages(
    path: &Path,
    image: &Grid<f32>,
    cells: &Grid<u8>,
    guttae: &Grid<u8>,
) -> Result<()> {
    let cells = cells.map(|&v| v as f32);
    let guttae = guttae.map(|&v| v as f32);
    write_pages(path, &[image, &cells, &guttae])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_depth_pages_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tif");
        let a = Grid::from_fn(7, 5, |x, y| (x * 30 + y) as f32);
        let b = Grid::from_fn(7, 5, |x, y| (x * 3000 + y) as f32);
        let c = Grid::from_fn(7, 5, |x, y| x as f32 * 0.25 - y as f32);
        write_pages(&path, &[&a, &b, &c]).unwrap();
        let back = read_pages(&path).unwrap();
        assert_eq!(back, vec![a, b, c]);
    }

    struct GrayAlpha8;
    impl colortype::ColorType for GrayAlpha8 {
        type Inner = u8;
        const TIFF_VALUE: tiff::tags::PhotometricInterpretation =
            tiff::tags::PhotometricInterpretation::BlackIsZero;
        const BITS_PER_SAMPLE: &'static [u16] = &[8, 8];
        const SAMPLE_FORMAT: &'static [tiff::tags::SampleFormat] =
            &[tiff::tags::SampleFormat::Uint, tiff::tags::SampleFormat::Uint];

        fn horizontal_predict(row: &[u8], result: &mut Vec<u8>) {
            result.extend_from_slice(row);
        }
    }

    #[test]
    fn gray_alpha_is_split_into_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ga.tif");
        let data: Vec<u8> = (0..12).flat_map(|i| [i as u8 * 10, if i % 2 == 0 { 255 } else { 0 }]).collect();
        {
            let mut enc = TiffEncoder::new(BufWriter::new(File::create(&path).unwrap())).unwrap();
            enc.write_image::<GrayAlpha8>(4, 3, &data).unwrap();
        }
        let pages = read_pages(&path).unwrap();
        assert_eq!(pages.len(), 2);
        assert_eq!(*pages[0].get(1, 0), 10.0);
        assert_eq!(*pages[1].get(0, 0), 255.0);
        assert_eq!(*pages[1].get(1, 0), 0.0);
    }

    #[test]
    fn rgb_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.tif");
        {
            let mut enc = TiffEncoder::new(BufWriter::new(File::create(&path).unwrap())).unwrap();
            enc.write_image::<colortype::RGB8>(2, 2, &[0u8; 12]).unwrap();
        }
        assert!(matches!(read_pages(&path), Err(Error::UnsupportedBitDepth(_))));
    }
}
