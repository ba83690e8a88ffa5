//! On-disk formats: the raster container, cohort metadata CSV and atomic writes.
//!
//! Raster container layout (all integers little-endian `u32`):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `NDRS` |
//! | 4 | version (1) |
//! | 4 | image count |
//! | 4 | width |
//! | 4 | height |
//! | count·width·height·4 | row-major `f32` planes, little-endian |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{Cohort, SubjectRecord};

pub const RASTER_MAGIC: &[u8; 4] = b"NDRS";
pub const RASTER_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serialises rows with a header line to CSV bytes.
pub fn csv_bytes<T: Serialize>(path: &Path, rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.into_inner()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(path, rows)?)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::csv(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub planes: Vec<Vec<f32>>,
}

pub fn encode_raster(r: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + r.planes.len() * r.width * r.height * 4);
    out.extend_from_slice(RASTER_MAGIC);
    for v in [RASTER_VERSION, r.planes.len() as u32, r.width as u32, r.height as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for plane in &r.planes {
        for v in plane {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_raster(bytes: &[u8], origin: &Path) -> Result<Raster> {
    let bad = |m: &str| Error::Data(format!("{}: {m}", origin.display()));
    if bytes.len() < 20 || &bytes[..4] != RASTER_MAGIC {
        return Err(bad("not a raster container"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != RASTER_VERSION {
        return Err(bad(&format!(
            "unsupported raster version {version} (expected {RASTER_VERSION})"
        )));
    }
    let (count, width, height) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let per = width * height;
    if bytes.len() != 20 + count * per * 4 {
        return Err(bad(&format!(
            "expected {} bytes for {count} images of {width}x{height}, found {}",
            20 + count * per * 4,
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let planes = if per == 0 {
        vec![Vec::new(); count]
    } else {
        values.chunks(per).map(<[f32]>::to_vec).collect()
    };
    Ok(Raster {
        width,
        height,
        planes,
    })
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    write_atomic(path, &encode_raster(r))
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes, path)
}

/// One row of the cohort metadata CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataRow {
    pub subject_id: String,
    pub cohort: Cohort,
    pub age: f64,
    pub sex: u8,
    pub severity: f64,
    pub duration_days: Option<f64>,
    pub event: Option<u8>,
}

impl From<&SubjectRecord> for MetadataRow {
    fn from(r: &SubjectRecord) -> Self {
        Self {
            subject_id: r.id.clone(),
            cohort: r.cohort,
            age: r.age,
            sex: r.sex,
            severity: r.severity,
            duration_days: r.duration_days,
            event: r.event.map(u8::from),
        }
    }
}

pub const IMAGES_FILE: &str = "images.bin";
pub const METADATA_FILE: &str = "metadata.csv";

/// Writes records as `images.bin` and `metadata.csv` in `dir`, in order.
pub fn write_cohort(dir: &Path, records: &[SubjectRecord], size: usize) -> Result<Vec<PathBuf>> {
    let raster = Raster {
        width: size,
        height: size,
        planes: records.iter().map(|r| r.image.clone()).collect(),
    };
    let rows: Vec<MetadataRow> = records.iter().map(MetadataRow::from).collect();
    let (img, meta) = (dir.join(IMAGES_FILE), dir.join(METADATA_FILE));
    write_raster(&img, &raster)?;
    write_csv(&meta, &rows)?;
    Ok(vec![img, meta])
}

/// Reads a cohort written by [`write_cohort`], validating ids and values.
pub fn read_cohort(dir: &Path) -> Result<(Vec<SubjectRecord>, usize)> {
    let raster = read_raster(&dir.join(IMAGES_FILE))?;
    let meta_path = dir.join(METADATA_FILE);
    let rows: Vec<MetadataRow> = read_csv(&meta_path)?;
    if rows.len() != raster.planes.len() {
        return Err(Error::Data(format!(
            "{}: {} metadata rows but {} images",
            meta_path.display(),
            rows.len(),
            raster.planes.len()
        )));
    }
    if raster.width != raster.height {
        return Err(Error::Data(format!(
            "images must be square, got {}x{}",
            raster.width, raster.height
        )));
    }
    let mut seen = std::collections::HashSet::new();
    let mut records = Vec::with_capacity(rows.len());
    for (row, image) in rows.into_iter().zip(raster.planes) {
        if !seen.insert(row.subject_id.clone()) {
            return Err(Error::Data(format!("duplicate subject id {}", row.subject_id)));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "subject {} has intensities outside [0, 1]",
                row.subject_id
            )));
        }
        if let Some(d) = row.duration_days.filter(|d| !(*d > 0.0)) {
            return Err(Error::Data(format!(
                "subject {} has non-positive duration {d}",
                row.subject_id
            )));
        }
        records.push(SubjectRecord {
            id: row.subject_id,
            cohort: row.cohort,
            age: row.age,
            sex: row.sex,
            severity: row.severity,
            duration_days: row.duration_days,
            event: row.event.map(|e| e != 0),
            image,
        });
    }
    Ok((records, raster.width))
}
