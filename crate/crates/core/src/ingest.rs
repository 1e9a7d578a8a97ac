//! Manifests, raster decoding, uncertain-label policies.
//!
//! Raster format: an ASCII header `IVRASTER 1 <H> <W> <C>\n` followed by
//! `H*W*C` little-endian `f32` values, row-major and channel-last. Binary 8-bit
//! PGM (`P5`) is also accepted on input.
//!
//! Manifest format: a header `classes:<c1>,<c2>,...` then one record per line,
//! `path|l1,l2,...,lk|t1 t2 ...`, labels in `{1, 0, -1}` and token ids
//! separated by single spaces. Paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RasterImage;

const RASTER_MAGIC: &str = "IVRASTER";

pub fn encode_raster(img: &RasterImage) -> Vec<u8> {
    let header = format!(
        "{RASTER_MAGIC} 1 {} {} {}\n",
        img.height, img.width, img.channels
    );
    let mut out = Vec::with_capacity(header.len() + img.pixels.len() * 4);
    out.extend_from_slice(header.as_bytes());
    for &v in &img.pixels {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_raster(path: &Path, img: &RasterImage) -> Result<()> {
    std::fs::write(path, encode_raster(img)).map_err(|e| Error::io(path, e))
}

pub fn load_raster(path: &Path) -> Result<RasterImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes, path)
}

/// Decodes an artifact raster or binary PGM held in memory. `path` is only used in errors.
pub fn decode_raster(bytes: &[u8], path: &Path) -> Result<RasterImage> {
    let err = |offset: usize, msg: &str| Error::Decode {
        path: path.to_path_buf(),
        offset,
        msg: msg.to_string(),
    };
    if bytes.starts_with(RASTER_MAGIC.as_bytes()) {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err(0, "header not terminated"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| err(0, "header not ASCII"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 5 || fields[1] != "1" {
            return Err(err(0, "malformed header"));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|_| err(0, "bad dimension"));
        let (h, w, c) = (dim(fields[2])?, dim(fields[3])?, dim(fields[4])?);
        let start = nl + 1;
        let need = h * w * c * 4;
        let payload = &bytes[start..];
        if payload.len() < need {
            return Err(err(bytes.len(), "truncated payload"));
        }
        if payload.len() > need {
            return Err(err(start + need, "trailing bytes after payload"));
        }
        let mut pixels = Vec::with_capacity(h * w * c);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            if !(0.0..=1.0).contains(&v) {
                return Err(err(start + 4 * i, "pixel outside [0, 1]"));
            }
            pixels.push(v);
        }
        return RasterImage::new(h, w, c, pixels).map_err(|e| err(0, &e.to_string()));
    }
    if bytes.starts_with(b"P5") {
        return decode_pgm(bytes, path);
    }
    Err(err(0, "unrecognized magic"))
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<RasterImage> {
    let err = |offset: usize, msg: &str| Error::Decode {
        path: path.to_path_buf(),
        offset,
        msg: msg.to_string(),
    };
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "malformed PGM header"));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .expect("digits")
            .parse()
            .map_err(|_| err(start, "bad PGM number"))?;
        fields.push(v);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(pos, "missing whitespace after PGM header"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(err(pos, "only 8-bit PGM is supported"));
    }
    let payload = &bytes[pos..];
    if payload.len() < w * h {
        return Err(err(bytes.len(), "truncated payload"));
    }
    let pixels = payload[..w * h]
        .iter()
        .map(|&b| (b as f64 / maxval as f64).min(1.0))
        .collect();
    RasterImage::new(h, w, 1, pixels).map_err(|e| err(0, &e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum UncertainPolicy {
    #[default]
    #[serde(rename = "u-ones")]
    UOnes,
    #[serde(rename = "u-zeros")]
    UZeros,
}

impl FromStr for UncertainPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u-ones" => Ok(UncertainPolicy::UOnes),
            "u-zeros" => Ok(UncertainPolicy::UZeros),
            other => Err(Error::contract(format!("unknown uncertain-label policy {other:?}"))),
        }
    }
}

impl fmt::Display for UncertainPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UncertainPolicy::UOnes => "u-ones",
            UncertainPolicy::UZeros => "u-zeros",
        })
    }
}

/// Resolves uncertain (-1) entries to 1 or 0.
pub fn apply_uncertain_policy(raw: &[f64], policy: UncertainPolicy) -> Result<Vec<f64>> {
    raw.iter()
        .map(|&v| match v {
            v if v == 1.0 || v == 0.0 => Ok(v),
            -1.0 => Ok(match policy {
                UncertainPolicy::UOnes => 1.0,
                UncertainPolicy::UZeros => 0.0,
            }),
            other => Err(Error::contract(format!("label value {other} not in {{1, 0, -1}}"))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_path: String,
    pub labels: Vec<i8>,
    pub tokens: Vec<u32>,
}

impl ManifestRecord {
    pub fn raw_labels(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub records: Vec<ManifestRecord>,
    /// Directory the record paths are relative to.
    pub dir: PathBuf,
}

impl Manifest {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn resolve(&self, rec: &ManifestRecord) -> PathBuf {
        self.dir.join(&rec.image_path)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("classes:{}\n", self.classes.join(","));
        for r in &self.records {
            let labels: Vec<String> = r.labels.iter().map(|l| l.to_string()).collect();
            let tokens: Vec<String> = r.tokens.iter().map(|t| t.to_string()).collect();
            s.push_str(&format!("{}|{}|{}\n", r.image_path, labels.join(","), tokens.join(" ")));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest_str(&text, path, dir)
}

pub fn parse_manifest_str(text: &str, path: &Path, dir: PathBuf) -> Result<Manifest> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty manifest".into()))?;
    let classes: Vec<String> = header
        .strip_prefix("classes:")
        .ok_or_else(|| perr(1, "header must start with \"classes:\"".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    if classes.iter().any(String::is_empty) {
        return Err(perr(1, "empty class name".into()));
    }
    let k = classes.len();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('|').collect();
        if cols.len() != 3 {
            return Err(perr(lineno, format!("expected 3 columns, found {}", cols.len())));
        }
        let image_path = cols[0].to_string();
        if image_path.is_empty() {
            return Err(perr(lineno, "empty image path".into()));
        }
        let labels = cols[1]
            .split(',')
            .map(|s| match s {
                "1" => Ok(1i8),
                "0" => Ok(0),
                "-1" => Ok(-1),
                other => Err(perr(lineno, format!("label {other:?} not in {{1, 0, -1}}"))),
            })
            .collect::<Result<Vec<i8>>>()?;
        if labels.len() != k {
            return Err(perr(lineno, format!("expected {k} labels, found {}", labels.len())));
        }
        let tokens = if cols[2].is_empty() {
            Vec::new()
        } else {
            cols[2]
                .split(' ')
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| perr(lineno, format!("bad token id {t:?}")))
                })
                .collect::<Result<Vec<u32>>>()?
        };
        if !seen.insert(image_path.clone()) {
            return Err(perr(lineno, format!("duplicate image path {image_path}")));
        }
        records.push(ManifestRecord {
            image_path,
            labels,
            tokens,
        });
    }
    Ok(Manifest { classes, records, dir })
}
