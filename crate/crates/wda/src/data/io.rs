//! Dataset persistence.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! root/
//!   images/*.png      16-bit grayscale slices (or images/stack.tif)
//!   masks/*.png       optional, nonzero = foreground, same filenames
//!   points.csv        optional, header `slice,row,col`
//! ```
//!
//! Slices order by filename (PNG) or page index (TIFF), so ids are stable.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::ImageBuffer;
use ndarray::Array2;

use crate::error::{Result, WdaError};

use super::{Domain, DomainSample};

/// How slices are stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackLayout {
    PngSlices,
    MultipageTiff,
}

/// Loads every slice of a dataset directory (or a bare multipage TIFF
/// file), attaching masks and points when present.
pub fn load_stack(path: &Path, layout: StackLayout, domain: Domain) -> Result<Vec<DomainSample>> {
    let (mut samples, root) = match layout {
        StackLayout::PngSlices => (load_png_slices(path)?, Some(path)),
        StackLayout::MultipageTiff => {
            if path.is_file() {
                (load_tiff_stack(path, None)?, None)
            } else {
                let stack = path.join("images").join("stack.tif");
                let masks = path.join("masks").join("stack.tif");
                let masks = masks.is_file().then_some(masks);
                (load_tiff_stack(&stack, masks.as_deref())?, Some(path))
            }
        }
    };
    if let Some(root) = root {
        let csv = root.join("points.csv");
        if csv.is_file() {
            let by_slice = load_points_csv(&csv)?;
            for s in &mut samples {
                let pts = by_slice.get(&s.id).cloned().unwrap_or_default();
                for &(r, c) in &pts {
                    if r >= s.height() || c >= s.width() {
                        return Err(WdaError::Invalid(format!(
                            "point ({r},{c}) outside slice {} of size {}x{}",
                            s.id,
                            s.height(),
                            s.width()
                        )));
                    }
                }
                s.points = Some(pts);
            }
        }
    }
    for s in &mut samples {
        s.domain = domain;
    }
    let mut shapes: Vec<(usize, usize)> = samples.iter().map(|s| s.image.dim()).collect();
    shapes.dedup();
    if shapes.len() > 1 {
        return Err(WdaError::Shape(format!("slices disagree on size: {shapes:?}")));
    }
    Ok(samples)
}

fn load_png_slices(root: &Path) -> Result<Vec<DomainSample>> {
    let img_dir = if root.join("images").is_dir() { root.join("images") } else { root.to_path_buf() };
    let mut names: Vec<String> = fs::read_dir(&img_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(WdaError::Invalid(format!("no PNG slices under {}", img_dir.display())));
    }
    let mask_dir = root.join("masks");
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let image = read_gray_png(&img_dir.join(&name))?;
        let mask_path = mask_dir.join(&name);
        let mask = if mask_path.is_file() {
            let m = read_gray_png(&mask_path)?;
            if m.dim() != image.dim() {
                return Err(WdaError::Shape(format!("mask size differs for {name}")));
            }
            Some(m.mapv(|v| u8::from(v > 0.0)))
        } else {
            None
        };
        let id = name.trim_end_matches(".png").trim_end_matches(".PNG").to_string();
        out.push(DomainSample { image, mask, points: None, domain: Domain::Source, id });
    }
    Ok(out)
}

fn read_gray_png(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let v: Vec<f32> = img.into_raw().iter().map(|&p| p as f32 / 65535.0).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), v).expect("buffer matches dimensions"))
}

fn load_tiff_stack(stack: &Path, masks: Option<&Path>) -> Result<Vec<DomainSample>> {
    let images = read_tiff_pages(stack)?;
    let mask_pages = match masks {
        Some(p) => Some(read_tiff_pages(p)?),
        None => None,
    };
    if let Some(mp) = &mask_pages {
        if mp.len() != images.len() {
            return Err(WdaError::Shape(format!(
                "mask stack has {} pages, image stack {}",
                mp.len(),
                images.len()
            )));
        }
    }
    Ok(images
        .into_iter()
        .enumerate()
        .map(|(i, image)| DomainSample {
            mask: mask_pages.as_ref().map(|mp| mp[i].mapv(|v| u8::from(v > 0.0))),
            image,
            points: None,
            domain: Domain::Source,
            id: format!("p{i:04}"),
        })
        .collect())
}

fn read_tiff_pages(path: &Path) -> Result<Vec<Array2<f32>>> {
    let file = BufReader::new(File::open(path)?);
    let mut dec = tiff::decoder::Decoder::new(file)?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = dec.dimensions()?;
        let page = match dec.read_image()? {
            tiff::decoder::DecodingResult::U8(v) => {
                Array2::from_shape_vec((h as usize, w as usize), v.iter().map(|&p| p as f32 / 255.0).collect())
            }
            tiff::decoder::DecodingResult::U16(v) => {
                Array2::from_shape_vec((h as usize, w as usize), v.iter().map(|&p| p as f32 / 65535.0).collect())
            }
            tiff::decoder::DecodingResult::F32(v) => Array2::from_shape_vec((h as usize, w as usize), v),
            other => {
                return Err(WdaError::Invalid(format!(
                    "unsupported TIFF sample format {:?}",
                    std::mem::discriminant(&other)
                )))
            }
        }
        .map_err(|e| WdaError::Shape(e.to_string()))?;
        pages.push(page);
        if !dec.more_images() {
            break;
        }
        dec.next_image()?;
    }
    Ok(pages)
}

/// Writes `root/images/*.png` (16-bit), `root/masks/*.png` where masks
/// exist, and `root/points.csv` when any sample carries points.
pub fn save_dataset(root: &Path, samples: &[DomainSample]) -> Result<()> {
    let img_dir = root.join("images");
    fs::create_dir_all(&img_dir)?;
    let any_mask = samples.iter().any(|s| s.mask.is_some());
    if any_mask {
        fs::create_dir_all(root.join("masks"))?;
    }
    let mut points: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for s in samples {
        write_gray16_png(&img_dir.join(format!("{}.png", s.id)), &s.image)?;
        if let Some(m) = &s.mask {
            write_mask_png(&root.join("masks").join(format!("{}.png", s.id)), m)?;
        }
        if let Some(p) = &s.points {
            points.insert(s.id.clone(), p.clone());
        }
    }
    if !points.is_empty() {
        save_points_csv(&root.join("points.csv"), &points)?;
    }
    Ok(())
}

/// 16-bit grayscale PNG; values clamped to `[0,1]`.
pub fn write_gray16_png(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let raw: Vec<u16> = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<image::Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// 8-bit PNG with foreground = 255.
pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let buf: ImageBuffer<image::Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// 8-bit RGB PNG from three planes in `[0,1]`.
pub fn write_rgb_png(path: &Path, rgb: &[Array2<f32>; 3]) -> Result<()> {
    let (h, w) = rgb[0].dim();
    let mut raw = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for plane in rgb {
                raw.push((plane[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let buf: ImageBuffer<image::Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Single-page 32-bit float TIFF, used for density map dumps.
pub fn write_f32_tiff(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = tiff::encoder::TiffEncoder::new(file)?;
    enc.write_image::<tiff::encoder::colortype::Gray32Float>(
        w as u32,
        h as u32,
        img.as_slice().expect("standard layout"),
    )?;
    Ok(())
}

/// Reads `slice,row,col` rows grouped by slice id.
pub fn load_points_csv(path: &Path) -> Result<BTreeMap<String, Vec<(usize, usize)>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(WdaError::Invalid(format!("points.csv row needs 3 fields, got {}", rec.len())));
        }
        let parse = |s: &str, what: &str| {
            s.trim().parse::<usize>().map_err(|_| WdaError::Invalid(format!("bad {what}: {s:?}")))
        };
        out.entry(rec[0].to_string())
            .or_default()
            .push((parse(&rec[1], "row")?, parse(&rec[2], "col")?));
    }
    Ok(out)
}

/// Writes points grouped by slice id with header `slice,row,col`.
pub fn save_points_csv(path: &Path, points: &BTreeMap<String, Vec<(usize, usize)>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["slice", "row", "col"])?;
    for (slice, pts) in points {
        for &(r, c) in pts {
            w.write_record([slice.as_str(), &r.to_string(), &c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
