//! PNG and raw-tensor (`HVTN`) files.
//!
//! `HVTN` layout, all little-endian: magic `"HVTN"`, version `u32`, rank
//! `u32`, `rank` extents as `u64`, then the `f64` payload in row-major order.

use std::cell::Cell;
use std::io::{Cursor, Read};
use std::path::Path;
use std::rc::Rc;

use hvsr_tensor::Tensor;

use super::Image;
use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 4] = b"HVTN";
const RAW_VERSION: u32 = 1;

pub fn encode_raw_tensor(t: &Tensor) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.buf.extend_from_slice(RAW_MAGIC);
    w.u32(RAW_VERSION);
    w.u32(t.rank() as u32);
    for &e in t.shape() {
        w.u64(e as u64);
    }
    w.f64s(t.data());
    w.buf
}

pub fn decode_raw_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new("HVTN", bytes);
    r.magic(RAW_MAGIC)?;
    let version = r.u32("version")?;
    if version != RAW_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let rank = r.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(r.u64("extent")? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| r.error("extent product overflows"))?;
    let data = r.f64s(numel, "payload")?;
    r.finish()?;
    Ok(Tensor::new(shape, data)?)
}

pub fn write_raw_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_raw_tensor(t))?;
    Ok(())
}

pub fn read_raw_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_raw_tensor(&std::fs::read(path)?)
}

/// Counts consumed bytes so decoder failures can report an offset.
struct CountingReader<R> {
    inner: R,
    count: Rc<Cell<u64>>,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.count.set(self.count.get() + n as u64);
        Ok(n)
    }
}

/// Decodes an 8- or 16-bit PNG of any color type into an RGB [`Image`].
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let count = Rc::new(Cell::new(0));
    let reader = CountingReader { inner: Cursor::new(bytes), count: Rc::clone(&count) };
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let parse_err = |offset: u64, e: png::DecodingError| Error::Parse {
        format: "PNG",
        offset,
        msg: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(|e| parse_err(count.get(), e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = match reader.next_frame(&mut buf) {
        Ok(info) => info,
        Err(e) => return Err(parse_err(count.get(), e)),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Parse { format: "PNG", offset: 0, msg: "unexpanded palette".into() })
        }
    };
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..];
            for c in 0..3 {
                let v = if channels >= 3 { px[c] } else { px[0] };
                data[(c * h + y) * w + x] = f64::from(v) / 255.0;
            }
        }
    }
    Image::clamped(Tensor::new(vec![3, h, w], data)?)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    decode_png(&std::fs::read(path)?)
}

/// Encodes as 8-bit RGB, rounding each clamped value to the nearest level.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let (h, w) = (img.height(), img.width());
    let d = img.tensor().data();
    let mut pixels = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                pixels.push((d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writer.write_image_data(&pixels).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}
