//! File formats.
//!
//! Image container (`.clim`), little-endian, 64-byte header then
//! `width * height` row-major `u32` counts:
//!
//! | offset | type     | field                         |
//! |--------|----------|-------------------------------|
//! | 0      | [u8; 4]  | magic `CLIM`                  |
//! | 4      | u32      | format version (1)            |
//! | 8      | u32      | endianness tag `0x01020304`   |
//! | 12     | u32      | band                          |
//! | 16     | u32      | width                         |
//! | 20     | u32      | height                        |
//! | 24     | f64      | background                    |
//! | 32     | f64      | psf sigma (pixels)            |
//! | 40     | f64 × 2  | origin (sky x, sky y)         |
//! | 56     | f64      | pixel scale                   |
//!
//! Task file: one record per line, `#` starts a comment.
//!
//! ```text
//! TASK <id> <stage> <x0> <y0> <x1> <y1> <estimated_work>
//! IMAGES <image id>...
//! SRC <source id> <27 parameters>
//! END
//! ```
//!
//! Floats are written in shortest round-trip form, so a task file read back
//! reproduces the tasks bit for bit.

use crate::catalog::{Catalog, CatalogEntry, CatalogRow, OutputRow};
use crate::error::{Error, Result};
use crate::model::{ImageMeta, ImagePatch, ParamVec, PARAM_DIM};
use crate::partition::{SkyRegion, Task};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const IMAGE_MAGIC: [u8; 4] = *b"CLIM";
pub const IMAGE_VERSION: u32 = 1;
pub const ENDIAN_TAG: u32 = 0x0102_0304;
pub const IMAGE_HEADER_LEN: usize = 64;

pub fn encode_image(patch: &ImagePatch) -> Vec<u8> {
    let m = &patch.meta;
    let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + 4 * patch.pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC);
    for v in [IMAGE_VERSION, ENDIAN_TAG, m.band as u32, m.width as u32, m.height as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [m.background, m.psf_sigma, m.origin[0], m.origin[1], m.pixel_scale] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    debug_assert_eq!(out.len(), IMAGE_HEADER_LEN);
    for p in &patch.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// `path` only labels errors.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<ImagePatch> {
    let corrupt = |msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < IMAGE_HEADER_LEN {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[0..4] != IMAGE_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(4) != IMAGE_VERSION {
        return Err(corrupt(format!("unsupported version {}", u32_at(4))));
    }
    if u32_at(8) != ENDIAN_TAG {
        return Err(corrupt(format!("endianness tag {:#010x}", u32_at(8))));
    }
    let (width, height) = (u32_at(16) as usize, u32_at(20) as usize);
    let n = width
        .checked_mul(height)
        .ok_or_else(|| corrupt("dimensions overflow".into()))?;
    if width == 0 || height == 0 {
        return Err(corrupt("empty image".into()));
    }
    if bytes.len() != IMAGE_HEADER_LEN + 4 * n {
        return Err(corrupt(format!(
            "{} bytes, expected {} for {width}x{height}",
            bytes.len(),
            IMAGE_HEADER_LEN + 4 * n
        )));
    }
    let meta = ImageMeta {
        band: u32_at(12) as usize,
        background: f64_at(24),
        psf_sigma: f64_at(32),
        origin: [f64_at(40), f64_at(48)],
        pixel_scale: f64_at(56),
        width,
        height,
    };
    let pixels = bytes[IMAGE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ImagePatch::new(meta, pixels).map_err(|e| corrupt(e.to_string()))
}

pub fn write_image(path: &Path, patch: &ImagePatch) -> Result<()> {
    std::fs::write(path, encode_image(patch)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<ImagePatch> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// Reads only the header of an image file.
pub fn read_image_meta(path: &Path) -> Result<ImageMeta> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; IMAGE_HEADER_LEN];
    f.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let meta_only = {
        let mut h = header.to_vec();
        // decode a 1x1 stand-in to reuse the header checks
        h[16..20].copy_from_slice(&1u32.to_le_bytes());
        h[20..24].copy_from_slice(&1u32.to_le_bytes());
        h.extend_from_slice(&0u32.to_le_bytes());
        decode_image(&h, path)?.meta
    };
    let width = u32::from_le_bytes(header[16..20].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(header[20..24].try_into().expect("4 bytes")) as usize;
    Ok(ImageMeta {
        width,
        height,
        ..meta_only
    })
}

/// Location of image `id` inside a survey directory.
pub fn image_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("image_{id:05}.clim"))
}

fn write_rows<T: serde::Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

/// Truth or prior catalog CSV with columns
/// `id,kind,x,y,flux_u,flux_g,flux_r,flux_i,flux_z,profile,eccentricity,scale,angle`.
pub fn write_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    write_rows(path, catalog.entries.iter().map(CatalogRow::from))
}

pub fn read_catalog(path: &Path) -> Result<Catalog> {
    let rows: Vec<CatalogRow> = read_rows(path)?;
    let mut entries = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let e = CatalogEntry::from(r);
        let bad = |msg: String| Error::parse(path, i + 2, msg);
        if !e.source.flux.iter().all(|f| f.is_finite() && *f > 0.0) {
            return Err(bad(format!("source {} has a nonpositive flux", r.id)));
        }
        if !e.source.position.iter().all(|p| p.is_finite()) {
            return Err(bad(format!("source {} has a non-finite position", r.id)));
        }
        e.source.shape.validate().map_err(|err| bad(format!("source {}: {err}", r.id)))?;
        entries.push(e);
    }
    Ok(Catalog { entries })
}

/// Inferred catalog CSV; see [`OutputRow`] for the columns.
pub fn write_output_catalog(path: &Path, rows: &[OutputRow]) -> Result<()> {
    write_rows(path, rows.iter())
}

pub fn read_output_catalog(path: &Path) -> Result<Vec<OutputRow>> {
    read_rows(path)
}

pub fn format_tasks(tasks: &[Task]) -> String {
    let mut s = String::from("# skyvi task file v1\n");
    for t in tasks {
        let r = &t.region;
        writeln!(
            s,
            "TASK {} {} {} {} {} {} {}",
            t.id, t.stage, r.min_corner[0], r.min_corner[1], r.max_corner[0], r.max_corner[1], t.estimated_work
        )
        .expect("string write");
        s.push_str("IMAGES");
        for i in &t.image_ids {
            write!(s, " {i}").expect("string write");
        }
        s.push('\n');
        for (id, p) in t.source_ids.iter().zip(&t.init) {
            write!(s, "SRC {id}").expect("string write");
            for v in p {
                write!(s, " {v}").expect("string write");
            }
            s.push('\n');
        }
        s.push_str("END\n");
    }
    s
}

pub fn parse_tasks(text: &str, path: &Path) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    let mut cur: Option<Task> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::parse(path, line_no, msg);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let tag = fields.next().expect("nonempty line");
        let rest: Vec<&str> = fields.collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<u64>().map_err(|_| err(format!("bad integer {s:?}")));
        match (tag, cur.as_mut()) {
            ("TASK", None) => {
                if rest.len() != 7 {
                    return Err(err(format!("TASK needs 7 fields, found {}", rest.len())));
                }
                let stage = int(rest[1])?;
                if stage != 1 && stage != 2 {
                    return Err(err(format!("stage {stage} is not 1 or 2")));
                }
                let region = SkyRegion::new([num(rest[2])?, num(rest[3])?], [num(rest[4])?, num(rest[5])?])
                    .map_err(|e| err(e.to_string()))?;
                cur = Some(Task {
                    id: int(rest[0])?,
                    stage: stage as u8,
                    region,
                    source_ids: Vec::new(),
                    init: Vec::new(),
                    image_ids: Vec::new(),
                    estimated_work: num(rest[6])?,
                });
            }
            ("IMAGES", Some(t)) => {
                for f in rest {
                    t.image_ids.push(int(f)? as usize);
                }
            }
            ("SRC", Some(t)) => {
                if rest.len() != 1 + PARAM_DIM {
                    return Err(err(format!("SRC needs {} fields, found {}", 1 + PARAM_DIM, rest.len())));
                }
                let mut p: ParamVec = [0.0; PARAM_DIM];
                for (k, f) in rest[1..].iter().enumerate() {
                    p[k] = num(f)?;
                    if !p[k].is_finite() {
                        return Err(err(format!("parameter {k} is not finite")));
                    }
                }
                t.source_ids.push(int(rest[0])?);
                t.init.push(p);
            }
            ("END", Some(_)) => tasks.push(cur.take().expect("open task")),
            (tag, None) => return Err(err(format!("{tag} outside a TASK record"))),
            (tag, Some(_)) => return Err(err(format!("unexpected {tag} inside a TASK record"))),
        }
    }
    if cur.is_some() {
        return Err(Error::parse(path, text.lines().count(), "task record missing END"));
    }
    Ok(tasks)
}

pub fn write_tasks(path: &Path, tasks: &[Task]) -> Result<()> {
    std::fs::write(path, format_tasks(tasks)).map_err(|e| Error::io(path, e))
}

pub fn read_tasks(path: &Path) -> Result<Vec<Task>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tasks(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch() -> ImagePatch {
        let meta = ImageMeta {
            band: 3,
            background: 101.5,
            psf_sigma: 1.25,
            origin: [-3.5, 7.25],
            pixel_scale: 0.75,
            width: 3,
            height: 2,
        };
        ImagePatch::new(meta, vec![0, 1, 2, 3, u32::MAX, 99]).unwrap()
    }

    #[test]
    fn image_header_layout() {
        let b = encode_image(&patch());
        assert_eq!(&b[0..4], b"CLIM");
        assert_eq!(&b[8..12], &[4, 3, 2, 1]);
        assert_eq!(b.len(), 64 + 24);
        assert_eq!(&b[64 + 16..64 + 20], &u32::MAX.to_le_bytes());
    }

    #[test]
    fn image_roundtrip() {
        let p = patch();
        assert_eq!(decode_image(&encode_image(&p), Path::new("x")).unwrap(), p);
    }

    #[test]
    fn truncated_image_names_file() {
        let b = encode_image(&patch());
        let e = decode_image(&b[..b.len() - 1], Path::new("sky/a.clim")).unwrap_err();
        assert!(e.to_string().contains("sky/a.clim"), "{e}");
    }

    #[test]
    fn bad_magic_rejected() {
        let mut b = encode_image(&patch());
        b[0] = b'X';
        assert!(decode_image(&b, Path::new("x")).is_err());
    }

    #[test]
    fn task_parse_errors_carry_line() {
        let text = "TASK 1 1 0 0 1 1 5\nIMAGES 0\nSRC 4 1 2\nEND\n";
        match parse_tasks(text, Path::new("t.txt")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
        assert!(parse_tasks("TASK 1 3 0 0 1 1 5\nEND\n", Path::new("t")).is_err());
        assert!(parse_tasks("TASK 1 1 0 0 1 1 5\n", Path::new("t")).is_err());
        assert!(parse_tasks("SRC 1\n", Path::new("t")).is_err());
    }
}
