//! Metadata and bounding-box CSV files in the ChestX-ray14 layout.
//!
//! Metadata: `Image Index`, `Finding Labels` (findings joined by `|`); other
//! columns are ignored. Bounding boxes: `Image Index`, `Finding Label`, then
//! either the dataset's `Bbox [x,y,w,h]` run of four columns or columns named
//! `x`, `y`, `w`, `h`. Optional `width`/`height` columns give the source image
//! size, which otherwise defaults to 1024×1024.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::vocab::{validate_findings, Finding, Position};

pub const DEFAULT_IMAGE_SIZE: f64 = 1024.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetadataRecord {
    pub image_id: String,
    pub findings: Vec<Finding>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BBoxRecord {
    pub image_id: String,
    pub finding: Finding,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl BBoxRecord {
    pub fn validate(&self) -> Result<()> {
        let ok = self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= self.image_width
            && self.y + self.h <= self.image_height;
        if ok {
            Ok(())
        } else {
            Err(Error::data(
                format!("bbox for {}", self.image_id),
                format!(
                    "box ({}, {}, {}, {}) does not fit a {}x{} image",
                    self.x, self.y, self.w, self.h, self.image_width, self.image_height
                ),
            ))
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case(name))
}

fn require_column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    column(headers, name).ok_or_else(|| Error::data("header", format!("missing column {name:?}")))
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn field<'a>(record: &'a csv::StringRecord, idx: usize, line: u64) -> Result<&'a str> {
    record
        .get(idx)
        .map(str::trim)
        .ok_or_else(|| Error::data(format!("line {line}"), format!("missing field {}", idx + 1)))
}

pub fn parse_metadata<R: Read>(input: R) -> Result<Vec<MetadataRecord>> {
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    let id_col = require_column(&headers, "Image Index")?;
    let label_col = require_column(&headers, "Finding Labels")?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        let image_id = field(&record, id_col, line)?.to_string();
        if image_id.is_empty() {
            return Err(Error::data(format!("line {line}"), "empty image id"));
        }
        let mut findings = Vec::new();
        for token in field(&record, label_col, line)?.split('|') {
            let finding = Finding::from_label(token).ok_or_else(|| {
                Error::data(
                    format!("line {line} ({image_id})"),
                    format!("unknown finding {:?}", token.trim()),
                )
            })?;
            findings.push(finding);
        }
        validate_findings(&findings)
            .map_err(|m| Error::data(format!("line {line} ({image_id})"), m))?;
        out.push(MetadataRecord { image_id, findings });
    }
    Ok(out)
}

pub fn write_metadata<W: Write>(records: &[MetadataRecord], output: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(output);
    w.write_record(["Image Index", "Finding Labels"])?;
    for r in records {
        let labels: Vec<&str> = r.findings.iter().map(|f| f.label()).collect();
        w.write_record([r.image_id.as_str(), &labels.join("|")])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn parse_number(text: &str, line: u64, what: &str) -> Result<f64> {
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::data(format!("line {line}"), format!("bad {what} value {text:?}")))
}

pub fn parse_bboxes<R: Read>(input: R) -> Result<Vec<BBoxRecord>> {
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    let id_col = require_column(&headers, "Image Index")?;
    let label_col = require_column(&headers, "Finding Label")?;
    let coords: [usize; 4] = match headers.iter().position(|h| h.trim().starts_with("Bbox")) {
        Some(start) => [start, start + 1, start + 2, start + 3],
        None => [
            require_column(&headers, "x")?,
            require_column(&headers, "y")?,
            require_column(&headers, "w")?,
            require_column(&headers, "h")?,
        ],
    };
    let width_col = column(&headers, "width");
    let height_col = column(&headers, "height");
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        let image_id = field(&record, id_col, line)?.to_string();
        let label = field(&record, label_col, line)?;
        let finding = Finding::from_label(label).ok_or_else(|| {
            Error::data(format!("line {line} ({image_id})"), format!("unknown finding {label:?}"))
        })?;
        let mut v = [0.0; 4];
        for (slot, (&col, name)) in v.iter_mut().zip(coords.iter().zip(["x", "y", "w", "h"])) {
            *slot = parse_number(field(&record, col, line)?, line, name)?;
        }
        let size = |col: Option<usize>, what| -> Result<f64> {
            match col {
                Some(c) => parse_number(field(&record, c, line)?, line, what),
                None => Ok(DEFAULT_IMAGE_SIZE),
            }
        };
        let rec = BBoxRecord {
            image_id,
            finding,
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
            image_width: size(width_col, "width")?,
            image_height: size(height_col, "height")?,
        };
        rec.validate()
            .map_err(|e| Error::data(format!("line {line}"), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_bboxes<W: Write>(records: &[BBoxRecord], output: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(output);
    w.write_record(["Image Index", "Finding Label", "x", "y", "w", "h", "width", "height"])?;
    for r in records {
        w.write_record([
            r.image_id.clone(),
            r.finding.label().to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.w.to_string(),
            r.h.to_string(),
            r.image_width.to_string(),
            r.image_height.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Maps the box centre onto a 3×3 grid of the image. A centre lying exactly
/// on a third-boundary belongs to the lower-index cell.
pub fn position_phrase(bbox: &BBoxRecord) -> Result<Position> {
    bbox.validate()?;
    // 3 * centre compared with k * extent, all on doubled coordinates so that
    // integral boxes compare exactly.
    let cell = |origin: f64, size: f64, extent: f64| -> usize {
        let twice_center_x3 = 3.0 * (2.0 * origin + size);
        if twice_center_x3 <= 2.0 * extent {
            0
        } else if twice_center_x3 <= 4.0 * extent {
            1
        } else {
            2
        }
    };
    Ok(Position {
        row: cell(bbox.y, bbox.h, bbox.image_height),
        col: cell(bbox.x, bbox.w, bbox.image_width),
    })
}
