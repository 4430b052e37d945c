//! Image and sample files.
//!
//! Grayscale images travel as binary PGM (8- or 16-bit), PNG, or a
//! whitespace-separated text matrix (one row per line). Values are read
//! into `[0, 1]`; writers clamp to `[0, 1]` and quantize.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
use image::{ExtendedColorType, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::imaging::DepthLayeredSample;
use crate::scalar::Scalar;

fn codec(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Reads a PGM, PNG or text matrix, chosen by extension.
pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "txt" | "tsv" | "csv" => read_text(path),
        "pgm" | "png" => {
            let reader = image::ImageReader::open(path)
                .map_err(|e| Error::io(path, e))?
                .with_guessed_format()
                .map_err(|e| Error::io(path, e))?;
            let img = reader.decode().map_err(codec(path))?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            if img.color().bytes_per_pixel() / img.color().channel_count() as u8 > 1 {
                let g = img.into_luma16();
                let data = g.as_raw().iter().map(|&v| T::lit(v as f64 / 65535.0)).collect();
                Image::from_vec(w, h, data)
            } else {
                let g = img.into_luma8();
                let data = g.as_raw().iter().map(|&v| T::lit(v as f64 / 255.0)).collect();
                Image::from_vec(w, h, data)
            }
        }
        other => Err(Error::domain(format!("unsupported image extension '{other}'"))),
    }
}

fn quantize<T: Scalar>(img: &Image<T>, max: f64) -> impl Iterator<Item = f64> + '_ {
    img.as_slice()
        .iter()
        .map(move |&v| (v.to_f64_lossy().clamp(0.0, 1.0) * max).round())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Binary PGM with 8 or 16 bits per sample.
pub fn write_pgm<T: Scalar>(path: impl AsRef<Path>, img: &Image<T>, bits: u8) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let header = |maxwhite| GraymapHeader {
        encoding: SampleEncoding::Binary,
        width: w,
        height: h,
        maxwhite,
    };
    match bits {
        8 => {
            let buf: Vec<u8> = quantize(img, 255.0).map(|v| v as u8).collect();
            PnmEncoder::new(create(path)?)
                .with_header(header(255).into())
                .encode(&buf[..], w, h, ExtendedColorType::L8)
                .map_err(codec(path))
        }
        16 => {
            let buf: Vec<u16> = quantize(img, 65535.0).map(|v| v as u16).collect();
            PnmEncoder::new(create(path)?)
                .with_header(header(65535).into())
                .encode(&buf[..], w, h, ExtendedColorType::L16)
                .map_err(codec(path))
        }
        _ => Err(Error::domain(format!("PGM depth must be 8 or 16 bits, got {bits}"))),
    }
}

/// 8-bit grayscale PNG.
pub fn write_png<T: Scalar>(path: impl AsRef<Path>, img: &Image<T>) -> Result<()> {
    let path = path.as_ref();
    let buf: Vec<u8> = quantize(img, 255.0).map(|v| v as u8).collect();
    image::GrayImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .expect("buffer matches dimensions")
        .save_with_format(path, ImageFormat::Png)
        .map_err(codec(path))
}

/// Whitespace-separated text matrix, full precision, not clamped.
pub fn write_text<T: Scalar>(path: impl AsRef<Path>, img: &Image<T>) -> Result<()> {
    let path = path.as_ref();
    let mut f = create(path)?;
    for y in 0..img.height() {
        let line: Vec<String> = img.row(y).iter().map(|v| v.to_f64_lossy().to_string()).collect();
        writeln!(f, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn read_text<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut width = None;
    let mut height = 0;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let row: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| Error::domain(format!("{}: {e}", path.display()))))
            .collect::<Result<_>>()?;
        if row.is_empty() {
            continue;
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::shape(format!("{}: ragged rows", path.display())));
            }
            _ => {}
        }
        data.extend(row.into_iter().map(T::lit));
        height += 1;
    }
    let width = width.ok_or_else(|| Error::shape(format!("{}: empty matrix", path.display())))?;
    Image::from_vec(width, height, data)
}

/// Writes by extension: 16-bit PGM, 8-bit PNG, or text.
pub fn write_image<T: Scalar>(path: impl AsRef<Path>, img: &Image<T>) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "pgm" => write_pgm(path, img, 16),
        "png" => write_png(path, img),
        "txt" | "tsv" => write_text(path, img),
        other => Err(Error::domain(format!("unsupported image extension '{other}'"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleManifest {
    layer_spacing_um: f64,
    in_focus_index: i64,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerEntry {
    index: i64,
    file: String,
}

/// Writes `sample.json` plus one text matrix per layer, exact to the bit.
pub fn write_sample<T: Scalar>(dir: impl AsRef<Path>, sample: &DepthLayeredSample<T>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::new();
    for (m, img) in sample.layers() {
        let file = format!("layer_{m}.txt");
        write_text(dir.join(&file), img)?;
        layers.push(LayerEntry { index: *m, file });
    }
    let manifest = SampleManifest {
        layer_spacing_um: sample.layer_spacing_um,
        in_focus_index: sample.in_focus_index,
        layers,
    };
    write_json(dir.join("sample.json"), &manifest)
}

pub fn read_sample<T: Scalar>(dir: impl AsRef<Path>) -> Result<DepthLayeredSample<T>> {
    let dir = dir.as_ref();
    let manifest: SampleManifest = read_json(dir.join("sample.json"))?;
    let layers = manifest
        .layers
        .iter()
        .map(|l| Ok((l.index, read_image(dir.join(&l.file))?)))
        .collect::<Result<Vec<_>>>()?;
    DepthLayeredSample::new(layers, manifest.layer_spacing_um, manifest.in_focus_index)
}

pub fn write_json<V: Serialize + ?Sized>(path: impl AsRef<Path>, value: &V) -> Result<()> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let mut f = create(&path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f).and_then(|_| f.flush()).map_err(|e| Error::io(&path, e))
}

pub fn read_json<V: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<V> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}
