//! Simple Geo Raster (SGR): the fixture asset format. A raster is a pair of
//! documents sharing a stem: `<name>.json` (shape, dtype, epsg, transform,
//! nodata) and `<name>.bin` (raw little-endian samples, row-major in
//! (band, row, col) order). Asset hrefs point at the `.json` sidecar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dtype, GridSpec, Raster, Samples};
use crate::stac::fetch::Fetcher;

/// Sidecar metadata document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgrMeta {
    /// [bands, rows, cols]
    pub shape: [usize; 3],
    pub dtype: Dtype,
    pub epsg: u32,
    /// [origin_x, pixel_width, origin_y, pixel_height]
    pub transform: [f64; 4],
    pub nodata: f64,
}

impl SgrMeta {
    pub fn of(raster: &Raster) -> SgrMeta {
        SgrMeta {
            shape: [raster.bands, raster.grid.height, raster.grid.width],
            dtype: raster.dtype(),
            epsg: raster.grid.epsg,
            transform: [
                raster.grid.origin_x,
                raster.grid.pixel_width,
                raster.grid.origin_y,
                raster.grid.pixel_height,
            ],
            nodata: raster.nodata,
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(
            self.epsg,
            self.transform[0],
            self.transform[2],
            self.transform[1],
            self.transform[3],
            self.shape[2],
            self.shape[1],
        )
    }
}

/// Strip a trailing `.json` or `.bin` to get the shared stem.
pub fn stem(href: &str) -> &str {
    href.strip_suffix(".json")
        .or_else(|| href.strip_suffix(".bin"))
        .unwrap_or(href)
}

/// Decode samples from a raw little-endian payload.
pub fn decode_samples(dtype: Dtype, payload: &[u8]) -> Result<Samples> {
    if payload.len() % dtype.size() != 0 {
        return Err(Error::InvalidRaster {
            reason: format!(
                "payload length {} is not a multiple of {} ({} samples)",
                payload.len(),
                dtype.size(),
                dtype.name()
            ),
        });
    }
    Ok(match dtype {
        Dtype::U8 => Samples::U8(payload.to_vec()),
        Dtype::U16 => Samples::U16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
        Dtype::F32 => Samples::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    })
}

/// Encode samples as a raw little-endian payload.
pub fn encode_samples(samples: &Samples) -> Vec<u8> {
    match samples {
        Samples::U8(v) => v.clone(),
        Samples::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Samples::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

/// Assemble a raster from its two documents.
pub fn parse(href: &str, meta_bytes: &[u8], payload: &[u8]) -> Result<Raster> {
    let meta: SgrMeta = serde_json::from_slice(meta_bytes).map_err(|e| Error::MalformedDocument {
        href: href.to_string(),
        reason: e.to_string(),
    })?;
    let grid = meta.grid()?;
    let expect = meta.shape[0] * meta.shape[1] * meta.shape[2] * meta.dtype.size();
    if payload.len() != expect {
        return Err(Error::InvalidRaster {
            reason: format!(
                "{href}: payload is {} bytes, shape {:?} as {} requires {expect}",
                payload.len(),
                meta.shape,
                meta.dtype.name()
            ),
        });
    }
    let samples = decode_samples(meta.dtype, payload)?;
    Raster::new(grid, meta.shape[0], meta.nodata, samples)
}

/// Fetch and assemble the raster behind an asset href (either document of
/// the pair works as the href).
pub fn read(fetcher: &Fetcher, href: &str) -> Result<Raster> {
    let stem = stem(href);
    let meta_bytes = fetcher.fetch(&format!("{stem}.json"))?;
    let payload = fetcher.fetch(&format!("{stem}.bin"))?;
    parse(href, &meta_bytes, &payload)
}

/// Write a raster pair under `stem` (fixture generation and tests).
/// Extensions are appended, so dotted stems like `scene.red` stay intact.
pub fn write(stem: &std::path::Path, raster: &Raster) -> Result<()> {
    if let Some(parent) = stem.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let meta = SgrMeta::of(raster);
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    let with_ext = |ext: &str| {
        let mut s = stem.as_os_str().to_os_string();
        s.push(".");
        s.push(ext);
        std::path::PathBuf::from(s)
    };
    std::fs::write(with_ext("json"), json)?;
    std::fs::write(with_ext("bin"), encode_samples(&raster.samples))?;
    Ok(())
}
