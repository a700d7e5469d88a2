//! `.nnt` dataset container and CSV fixture ingestion.
//!
//! Layout of an `.nnt` file:
//!
//! ```text
//! offset 0   4 bytes   magic  b"NNTF"
//! offset 4   u32 LE    format version (1)
//! offset 8   u64 LE    header length H
//! offset 16  H bytes   UTF-8 JSON header {G, T, C, D, channels, time_index}
//! then       G*T*C*D   f32 LE, row-major over (g, t, c, d)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{NnnError, Result};
use crate::scalar::Scalar;
use crate::tensor::{ChannelKind, ChannelSpec, MediaTensor};

pub const NNT_MAGIC: &[u8; 4] = b"NNTF";
pub const NNT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct NntHeader {
    #[serde(rename = "G")]
    geos: usize,
    #[serde(rename = "T")]
    weeks: usize,
    #[serde(rename = "C")]
    channels_n: usize,
    #[serde(rename = "D")]
    width: usize,
    channels: Vec<ChannelSpec>,
    time_index: Vec<i64>,
}

pub(crate) fn write_container(
    w: &mut impl Write,
    magic: &[u8; 4],
    version: u32,
    header: &[u8],
    payload: impl Iterator<Item = f32>,
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    let mut buf = Vec::new();
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Parses magic, version and header; returns `(header bytes, payload bytes)`.
pub(crate) fn read_container<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u32,
) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(NnnError::Format(format!(
            "missing magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes.len() < 16 {
        return Err(NnnError::Truncated("preamble shorter than 16 bytes".into()));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(NnnError::Version {
            found,
            expected: version,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let rest = &bytes[16..];
    if rest.len() < hlen {
        return Err(NnnError::Truncated(format!(
            "header declares {hlen} bytes, {} available",
            rest.len()
        )));
    }
    Ok(rest.split_at(hlen))
}

pub(crate) fn decode_f32(payload: &[u8], expected: usize) -> Result<Vec<f32>> {
    if payload.len() != expected * 4 {
        return Err(NnnError::Shape(format!(
            "payload holds {} bytes, header implies {} f32 values ({} bytes)",
            payload.len(),
            expected,
            expected * 4
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_nnt<T: Scalar>(x: &MediaTensor<T>, w: &mut impl Write) -> Result<()> {
    let (g, t, c, d) = x.dim();
    let header = NntHeader {
        geos: g,
        weeks: t,
        channels_n: c,
        width: d,
        channels: x.channels().to_vec(),
        time_index: x.time_index().to_vec(),
    };
    let header = serde_json::to_vec(&header)?;
    let payload = x.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN));
    write_container(w, NNT_MAGIC, NNT_VERSION, &header, payload)
}

pub fn read_nnt<T: Scalar>(r: &mut impl Read) -> Result<MediaTensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_nnt(&bytes)
}

pub fn decode_nnt<T: Scalar>(bytes: &[u8]) -> Result<MediaTensor<T>> {
    let (header, payload) = read_container(bytes, NNT_MAGIC, NNT_VERSION)?;
    let h: NntHeader = serde_json::from_slice(header)
        .map_err(|e| NnnError::Format(format!("header: {e}")))?;
    if h.channels.len() != h.channels_n {
        return Err(NnnError::Shape(format!(
            "header lists {} channels but C = {}",
            h.channels.len(),
            h.channels_n
        )));
    }
    let n = h.geos * h.weeks * h.channels_n * h.width;
    let values = decode_f32(payload, n)?;
    let data = Array4::from_shape_vec(
        (h.geos, h.weeks, h.channels_n, h.width),
        values.into_iter().map(|v| T::of(v as f64)).collect(),
    )
    .map_err(|e| NnnError::Shape(e.to_string()))?;
    MediaTensor::new(data, h.channels, h.time_index)
}

pub fn save_nnt<T: Scalar>(x: &MediaTensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_nnt(x, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_nnt<T: Scalar>(path: impl AsRef<Path>) -> Result<MediaTensor<T>> {
    decode_nnt(&std::fs::read(path)?)
}

/// Reads the CSV fixture form: header `geo,time,channel,d0,..,d{D-1}`, one row
/// per `(g, t, c)`. Channel kinds come from the name: `sales` is the target,
/// `search` is organic, everything else is media. Channels appear in order of
/// first mention; a channel whose columns past the first are all zero gets
/// `native_dim = 1`.
pub fn read_csv<T: Scalar>(r: impl Read) -> Result<MediaTensor<T>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr
        .headers()
        .map_err(|e| NnnError::Format(e.to_string()))?
        .clone();
    if headers.len() < 4 || &headers[0] != "geo" || &headers[1] != "time" || &headers[2] != "channel" {
        return Err(NnnError::Format(
            "expected header geo,time,channel,d0,...".into(),
        ));
    }
    let d = headers.len() - 3;
    let mut rows: Vec<(usize, i64, usize, Vec<f64>)> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| NnnError::Format(e.to_string()))?;
        let parse_err = |what: &str| NnnError::Format(format!("bad {what} in row {rec:?}"));
        let g: usize = rec[0].trim().parse().map_err(|_| parse_err("geo"))?;
        let t: i64 = rec[1].trim().parse().map_err(|_| parse_err("time"))?;
        let name = rec[2].trim().to_string();
        let ci = match names.iter().position(|n| *n == name) {
            Some(i) => i,
            None => {
                names.push(name);
                names.len() - 1
            }
        };
        let vals = (3..rec.len())
            .map(|i| rec[i].trim().parse::<f64>().map_err(|_| parse_err("value")))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != d {
            return Err(NnnError::Shape(format!("row has {} values, expected {d}", vals.len())));
        }
        rows.push((g, t, ci, vals));
    }
    let geos = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut times: Vec<i64> = rows.iter().map(|r| r.1).collect();
    times.sort_unstable();
    times.dedup();
    let c = names.len();
    let mut data = Array4::<T>::zeros((geos, times.len(), c, d));
    let mut wide = vec![false; c];
    for (g, t, ci, vals) in &rows {
        let ti = times.binary_search(t).unwrap();
        for (k, v) in vals.iter().enumerate() {
            data[[*g, ti, *ci, k]] = T::of(*v);
            if k > 0 && *v != 0.0 {
                wide[*ci] = true;
            }
        }
    }
    let channels = names
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let kind = match name.as_str() {
                "sales" => ChannelKind::Target,
                "search" => ChannelKind::Organic,
                _ => ChannelKind::Media,
            };
            ChannelSpec::new(name, kind, if wide[i] { d } else { 1 })
        })
        .collect();
    MediaTensor::new(data, channels, times)
}
