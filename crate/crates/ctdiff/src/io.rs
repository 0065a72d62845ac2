//! On-disk formats.
//!
//! Images and projections are stored as raw little-endian f32 (`.f32raw`)
//! with a JSON sidecar carrying shape and metadata; weights as a single
//! `.wts` file holding a JSON manifest plus a flat little-endian f32 blob.
//! Both formats round-trip bit-exactly and are trivially readable from any
//! language.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::projection::Projection;

const WTS_MAGIC: &[u8; 4] = b"WTS1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    height: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pixel_size_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_views: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_bins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    incident_photons: Option<f64>,
}

fn sidecar_path(raw_path: &Path) -> PathBuf {
    raw_path.with_extension("json")
}

fn write_f32_le(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32_le(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::invalid(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `<path>.f32raw` and `<path>.json`. `path` should carry the
/// `.f32raw` extension; the sidecar name is derived from it.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    write_f32_le(path, img.data())?;
    let sidecar = Sidecar {
        format: "f32raw/v1".into(),
        kind: "image".into(),
        width: Some(img.width()),
        height: Some(img.height()),
        pixel_size_mm: Some(img.pixel_size_mm()),
        n_views: None,
        n_bins: None,
        incident_photons: None,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Image> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.kind != "image" {
        return Err(Error::invalid(format!(
            "{}: sidecar kind is '{}', expected 'image'",
            path.display(),
            sidecar.kind
        )));
    }
    let (w, h) = match (sidecar.width, sidecar.height) {
        (Some(w), Some(h)) => (w, h),
        _ => return Err(Error::invalid("image sidecar missing width/height")),
    };
    Image::new(w, h, sidecar.pixel_size_mm.unwrap_or(1.0), read_f32_le(path)?)
}

pub fn save_projection(path: &Path, proj: &Projection) -> Result<()> {
    write_f32_le(path, proj.data())?;
    let sidecar = Sidecar {
        format: "f32raw/v1".into(),
        kind: "projection".into(),
        width: None,
        height: None,
        pixel_size_mm: None,
        n_views: Some(proj.n_views()),
        n_bins: Some(proj.n_bins()),
        incident_photons: proj.incident_photons(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_projection(path: &Path) -> Result<Projection> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.kind != "projection" {
        return Err(Error::invalid(format!(
            "{}: sidecar kind is '{}', expected 'projection'",
            path.display(),
            sidecar.kind
        )));
    }
    let (v, b) = match (sidecar.n_views, sidecar.n_bins) {
        (Some(v), Some(b)) => (v, b),
        _ => return Err(Error::invalid("projection sidecar missing n_views/n_bins")),
    };
    let mut proj = Projection::new(v, b, read_f32_le(path)?)?;
    if let Some(photons) = sidecar.incident_photons {
        proj.set_incident_photons(photons);
    }
    Ok(proj)
}

/// Named parameter tensor shape inside a weights file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct WeightsEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl WeightsEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsManifest {
    format: String,
    dtype: String,
    entries: Vec<WeightsEntry>,
    #[serde(default)]
    meta: serde_json::Map<String, serde_json::Value>,
}

/// Parameter blob plus its manifest: entry order defines the flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub entries: Vec<WeightsEntry>,
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub payload: Vec<f32>,
}

impl WeightsFile {
    pub fn new(
        entries: Vec<WeightsEntry>,
        meta: serde_json::Map<String, serde_json::Value>,
        payload: Vec<f32>,
    ) -> Result<Self> {
        let expect: usize = entries.iter().map(WeightsEntry::len).sum();
        if expect != payload.len() {
            return Err(Error::shape_mismatch(
                format!("{expect} parameters from manifest"),
                format!("{} in payload", payload.len()),
            ));
        }
        Ok(Self {
            entries,
            meta,
            payload,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = WeightsManifest {
            format: "wts/v1".into(),
            dtype: "f32le".into(),
            entries: self.entries.clone(),
            meta: self.meta.clone(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut f = fs::File::create(path)?;
        f.write_all(WTS_MAGIC)?;
        f.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
        f.write_all(&manifest_bytes)?;
        let mut payload_bytes = Vec::with_capacity(self.payload.len() * 4);
        for v in &self.payload {
            payload_bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&payload_bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != WTS_MAGIC {
            return Err(Error::invalid(format!(
                "{}: not a weights file (bad magic)",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 4];
        f.read_exact(&mut len_bytes)?;
        let manifest_len = u32::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        f.read_exact(&mut manifest_bytes)?;
        let manifest: WeightsManifest = serde_json::from_slice(&manifest_bytes)?;
        if manifest.dtype != "f32le" {
            return Err(Error::invalid(format!(
                "unsupported weights dtype '{}'",
                manifest.dtype
            )));
        }
        let mut rest = Vec::new();
        f.read_to_end(&mut rest)?;
        if rest.len() % 4 != 0 {
            return Err(Error::invalid("weights payload length not a multiple of 4"));
        }
        let payload: Vec<f32> = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        WeightsFile::new(manifest.entries, manifest.meta, payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn image_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.f32raw");
        let img = Image::new(3, 2, 0.5, vec![0.0, -1.5, 3.25, 1e-20, 7.0, 0.1]).unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn projection_round_trip_with_metadata() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("proj.f32raw");
        let mut p = Projection::new(2, 3, vec![0.9, 1.0, 0.5, 0.25, 0.125, 1.5]).unwrap();
        p.set_incident_photons(31250.0);
        save_projection(&path, &p).unwrap();
        let back = load_projection(&path).unwrap();
        assert_eq!(p, back);
        assert_eq!(back.incident_photons(), Some(31250.0));
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.f32raw");
        let img = Image::new(2, 2, 1.0, vec![0.0; 4]).unwrap();
        save_image(&path, &img).unwrap();
        assert!(load_projection(&path).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.wts");
        let entries = vec![
            WeightsEntry {
                name: "conv.weight".into(),
                shape: vec![4, 1, 3, 3],
            },
            WeightsEntry {
                name: "conv.bias".into(),
                shape: vec![4],
            },
        ];
        let payload: Vec<f32> = (0..40).map(|i| i as f32 * 0.25 - 3.0).collect();
        let mut meta = serde_json::Map::new();
        meta.insert("base_width".into(), 4.into());
        let w = WeightsFile::new(entries, meta, payload).unwrap();
        w.save(&path).unwrap();
        let back = WeightsFile::load(&path).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn weights_manifest_must_match_payload() {
        let entries = vec![WeightsEntry {
            name: "w".into(),
            shape: vec![10],
        }];
        assert!(WeightsFile::new(entries, Default::default(), vec![0.0; 9]).is_err());
    }
}
