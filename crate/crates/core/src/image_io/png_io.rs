use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub(crate) fn read_gray(path: &Path) -> Result<Grid<f32>> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedFormat("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let values: Vec<f32> = match (info.color_type, info.bit_depth) {
        (ColorType::Grayscale, BitDepth::Eight) => data.iter().map(|&v| f32::from(v)).collect(),
        (ColorType::Grayscale, BitDepth::Sixteen) => data
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])))
            .collect(),
        (color, depth) => {
            return Err(Error::UnsupportedBitDepth(format!(
                "png {color:?} at {depth:?} (expected 8/16-bit grayscale)"
            )))
        }
    };
    Grid::from_vec(w, h, values)
}

fn encode<W: Write>(
    out: W,
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    data: &[u8],
) -> Result<()> {
    let mut encoder = png::Encoder::new(out, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

pub(crate) fn write_u8(path: &Path, grid: &Grid<u8>) -> Result<()> {
    let out = BufWriter::new(File::create(path)?);
    encode(
        out,
        grid.width(),
        grid.height(),
        ColorType::Grayscale,
        BitDepth::Eight,
        grid.as_slice(),
    )
}

pub(crate) fn write_u16(path: &Path, grid: &Grid<u16>) -> Result<()> {
    let bytes: Vec<u8> = grid.as_slice().iter().flat_map(|v| v.to_be_bytes()).collect();
    let out = BufWriter::new(File::create(path)?);
    encode(
        out,
        grid.width(),
        grid.height(),
        ColorType::Grayscale,
        BitDepth::Sixteen,
        &bytes,
    )
}

/// Writes integer-valued intensities as 8- or 16-bit grayscale.
pub(crate) fn write_image(path: &Path, grid: &Grid<f32>) -> Result<()> {
    let integral = |max: f32| {
        grid.as_slice()
            .iter()
            .all(|&v| v >= 0.0 && v <= max && v.fract() == 0.0)
    };
    if integral(255.0) {
        write_u8(path, &grid.map(|&v| v as u8))
    } else if integral(65535.0) {
        write_u16(path, &grid.map(|&v| v as u16))
    } else {
        Err(Error::UnsupportedBitDepth(
            "png pages hold 8/16-bit integer intensities only".into(),
        ))
    }
}

/// In-memory RGBA PNG.
pub fn encode_rgba(width: usize, height: usize, rgba: &[u8]) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    encode(
        &mut out,
        width,
        height,
        ColorType::Rgba,
        BitDepth::Eight,
        rgba,
    )?;
    Ok(out.into_inner())
}
