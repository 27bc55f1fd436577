//! Target grids, pixel/world coordinate conversions, point reprojection
//! (identity and spherical-Mercator pairs only), and raster resampling.
//!
//! All grids are axis-aligned and north-up: `pixel_width > 0`,
//! `pixel_height < 0`, no rotation or shear terms.

pub mod sgr;

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::stac::StacItem;

/// Earth radius used by the spherical Mercator projection (EPSG:3857), meters.
pub const MERCATOR_RADIUS: f64 = 6_378_137.0;

pub const EPSG_WGS84: u32 = 4326;
pub const EPSG_WEB_MERCATOR: u32 = 3857;

/// Closed-interval bounding box in the coordinate units of its CRS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub minx: f64,
    pub miny: f64,
    pub maxx: f64,
    pub maxy: f64,
}

impl BBox {
    pub fn new(minx: f64, miny: f64, maxx: f64, maxy: f64) -> Result<Self> {
        if minx > maxx || miny > maxy {
            return Err(Error::InvalidQuery {
                reason: format!("inverted bbox [{minx}, {miny}, {maxx}, {maxy}]"),
            });
        }
        Ok(BBox {
            minx,
            miny,
            maxx,
            maxy,
        })
    }

    /// Closed-interval test: boxes that touch along an edge intersect.
    pub fn intersects(&self, other: &BBox) -> bool {
        self.minx <= other.maxx
            && other.minx <= self.maxx
            && self.miny <= other.maxy
            && other.miny <= self.maxy
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        if !self.intersects(other) {
            return None;
        }
        Some(BBox {
            minx: self.minx.max(other.minx),
            miny: self.miny.max(other.miny),
            maxx: self.maxx.min(other.maxx),
            maxy: self.maxy.min(other.maxy),
        })
    }
}

/// Target raster grid every frame of a cube is aligned to.
///
/// `(origin_x, origin_y)` is the world position of the top-left corner of
/// pixel (0, 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub epsg: u32,
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(
        epsg: u32,
        origin_x: f64,
        origin_y: f64,
        pixel_width: f64,
        pixel_height: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let grid = GridSpec {
            epsg,
            origin_x,
            origin_y,
            pixel_width,
            pixel_height,
            width,
            height,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixel_width <= 0.0 {
            return Err(Error::InvalidGrid {
                reason: format!("pixel_width must be > 0, got {}", self.pixel_width),
            });
        }
        if self.pixel_height >= 0.0 {
            return Err(Error::InvalidGrid {
                reason: format!("pixel_height must be < 0, got {}", self.pixel_height),
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGrid {
                reason: format!("dimensions must be positive, got {}x{}", self.height, self.width),
            });
        }
        Ok(())
    }

    /// World-coordinate extent covered by the grid.
    pub fn bbox(&self) -> BBox {
        BBox {
            minx: self.origin_x,
            miny: self.origin_y + self.height as f64 * self.pixel_height,
            maxx: self.origin_x + self.width as f64 * self.pixel_width,
            maxy: self.origin_y,
        }
    }

    pub fn in_bounds(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    /// Sub-grid covering `rows x cols` pixels starting at (row0, col0).
    pub fn window(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<GridSpec> {
        if row0 + rows > self.height || col0 + cols > self.width {
            return Err(Error::IndexOutOfRange {
                row: row0 + rows,
                col: col0 + cols,
                height: self.height,
                width: self.width,
            });
        }
        GridSpec::new(
            self.epsg,
            self.origin_x + col0 as f64 * self.pixel_width,
            self.origin_y + row0 as f64 * self.pixel_height,
            self.pixel_width,
            self.pixel_height,
            cols,
            rows,
        )
    }
}

/// Pixel containing the world point: `col = floor((x - origin_x) / pixel_width)`,
/// `row = floor((y - origin_y) / pixel_height)`. Out-of-bounds indices are
/// returned as-is; check with [`GridSpec::in_bounds`].
pub fn world_to_pixel(grid: &GridSpec, x: f64, y: f64) -> (i64, i64) {
    let col = ((x - grid.origin_x) / grid.pixel_width).floor() as i64;
    let row = ((y - grid.origin_y) / grid.pixel_height).floor() as i64;
    (row, col)
}

/// World coordinates of the center of pixel (row, col).
pub fn pixel_to_world(grid: &GridSpec, row: usize, col: usize) -> Result<(f64, f64)> {
    if row >= grid.height || col >= grid.width {
        return Err(Error::IndexOutOfRange {
            row,
            col,
            height: grid.height,
            width: grid.width,
        });
    }
    Ok(cell_center(grid, row as i64, col as i64))
}

fn cell_center(grid: &GridSpec, row: i64, col: i64) -> (f64, f64) {
    let x = grid.origin_x + (col as f64 + 0.5) * grid.pixel_width;
    let y = grid.origin_y + (row as f64 + 0.5) * grid.pixel_height;
    (x, y)
}

/// Reproject a point between the supported CRS pairs: any identity pair,
/// 4326 -> 3857 and 3857 -> 4326 (spherical Mercator, closed form).
pub fn reproject_point(from_epsg: u32, to_epsg: u32, x: f64, y: f64) -> Result<(f64, f64)> {
    if from_epsg == to_epsg {
        return Ok((x, y));
    }
    match (from_epsg, to_epsg) {
        (EPSG_WGS84, EPSG_WEB_MERCATOR) => {
            if y.abs() >= 90.0 {
                return Err(Error::LatitudeOutOfRange { lat: y });
            }
            let mx = MERCATOR_RADIUS * x.to_radians();
            // atanh(sin phi) == ln(tan(pi/4 + phi/2)), exact at the equator.
            let my = MERCATOR_RADIUS * y.to_radians().sin().atanh();
            Ok((mx, my))
        }
        (EPSG_WEB_MERCATOR, EPSG_WGS84) => {
            let lon = (x / MERCATOR_RADIUS).to_degrees();
            let lat = (2.0 * (y / MERCATOR_RADIUS).exp().atan() - PI / 2.0).to_degrees();
            Ok((lon, lat))
        }
        _ => Err(Error::UnsupportedCrs {
            from: from_epsg,
            to: to_epsg,
        }),
    }
}

/// Smallest even-dimensioned grid at `resolution` covering the intersection
/// of `query_bbox` with the union of the items' footprints, origin snapped
/// outward to integer multiples of the resolution.
///
/// `query_bbox` is in EPSG:4326 degrees, as in a search query; it is
/// converted when the items use EPSG:3857.
pub fn common_grid(items: &[StacItem], query_bbox: &BBox, resolution: f64) -> Result<GridSpec> {
    if items.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    if resolution <= 0.0 {
        return Err(Error::InvalidGrid {
            reason: format!("resolution must be > 0, got {resolution}"),
        });
    }
    let epsg = items[0].epsg;
    for item in items {
        if item.epsg != epsg {
            return Err(Error::MixedEpsg {
                expected: epsg,
                found: item.epsg,
            });
        }
    }

    let query = if epsg == EPSG_WGS84 {
        *query_bbox
    } else if epsg == EPSG_WEB_MERCATOR {
        let (minx, miny) = reproject_point(EPSG_WGS84, EPSG_WEB_MERCATOR, query_bbox.minx, query_bbox.miny)?;
        let (maxx, maxy) = reproject_point(EPSG_WGS84, EPSG_WEB_MERCATOR, query_bbox.maxx, query_bbox.maxy)?;
        BBox {
            minx,
            miny,
            maxx,
            maxy,
        }
    } else {
        return Err(Error::UnsupportedCrs {
            from: EPSG_WGS84,
            to: epsg,
        });
    };

    let footprints: Vec<BBox> = items.iter().map(|it| it.footprint()).collect();
    if !footprints.iter().any(|fp| fp.intersects(&query)) {
        return Err(Error::EmptyIntersection);
    }
    let mut union = footprints[0];
    for fp in &footprints[1..] {
        union.minx = union.minx.min(fp.minx);
        union.miny = union.miny.min(fp.miny);
        union.maxx = union.maxx.max(fp.maxx);
        union.maxy = union.maxy.max(fp.maxy);
    }
    let ext = query
        .intersection(&union)
        .ok_or(Error::EmptyIntersection)?;

    let origin_x = (ext.minx / resolution).floor() * resolution;
    let origin_y = (ext.maxy / resolution).ceil() * resolution;
    let mut width = ((ext.maxx - origin_x) / resolution).ceil() as usize;
    let mut height = ((origin_y - ext.miny) / resolution).ceil() as usize;
    // The model's downsample/upsample stage requires even spatial dims.
    width += width % 2;
    height += height % 2;

    GridSpec::new(epsg, origin_x, origin_y, resolution, -resolution, width, height)
}

/// Sample type of a raster or cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U16,
    F32,
}

impl Dtype {
    pub fn size(&self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
            Dtype::F32 => "f32",
        }
    }

    pub fn parse(s: &str) -> Result<Dtype> {
        match s {
            "u8" => Ok(Dtype::U8),
            "u16" => Ok(Dtype::U16),
            "f32" => Ok(Dtype::F32),
            other => Err(Error::InvalidRaster {
                reason: format!("unknown dtype {other:?}"),
            }),
        }
    }
}

/// Typed sample storage, row-major in (band, row, col) order.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::U8(v) => v.len(),
            Samples::U16(v) => v.len(),
            Samples::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Samples::U8(_) => Dtype::U8,
            Samples::U16(_) => Dtype::U16,
            Samples::F32(_) => Dtype::F32,
        }
    }

    fn get(&self, i: usize) -> f64 {
        match self {
            Samples::U8(v) => v[i] as f64,
            Samples::U16(v) => v[i] as f64,
            Samples::F32(v) => v[i] as f64,
        }
    }
}

/// In-memory raster: a grid plus one or more bands of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub grid: GridSpec,
    pub bands: usize,
    pub nodata: f64,
    pub samples: Samples,
}

/// Resampling method for [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    Nearest,
    Bilinear,
}

impl Raster {
    pub fn new(grid: GridSpec, bands: usize, nodata: f64, samples: Samples) -> Result<Self> {
        grid.validate()?;
        let expect = bands * grid.height * grid.width;
        if samples.len() != expect {
            return Err(Error::InvalidRaster {
                reason: format!(
                    "sample count {} does not match {} bands x {}x{}",
                    samples.len(),
                    bands,
                    grid.height,
                    grid.width
                ),
            });
        }
        let raster = Raster {
            grid,
            bands,
            nodata,
            samples,
        };
        raster.check_nodata()?;
        Ok(raster)
    }

    fn check_nodata(&self) -> Result<()> {
        let representable = match self.samples.dtype() {
            Dtype::U8 => self.nodata.fract() == 0.0 && (0.0..=255.0).contains(&self.nodata),
            Dtype::U16 => self.nodata.fract() == 0.0 && (0.0..=65535.0).contains(&self.nodata),
            Dtype::F32 => true,
        };
        if !representable {
            return Err(Error::InvalidRaster {
                reason: format!(
                    "nodata {} not representable in {}",
                    self.nodata,
                    self.samples.dtype().name()
                ),
            });
        }
        Ok(())
    }

    pub fn dtype(&self) -> Dtype {
        self.samples.dtype()
    }

    /// Sample value as f64 (exact for all supported dtypes).
    pub fn get(&self, band: usize, row: usize, col: usize) -> f64 {
        let i = (band * self.grid.height + row) * self.grid.width + col;
        self.samples.get(i)
    }

    /// Nodata comparison; f32 compares bit patterns so NaN sentinels work.
    pub fn is_nodata(&self, value: f64) -> bool {
        match self.samples.dtype() {
            Dtype::F32 => (value as f32).to_bits() == (self.nodata as f32).to_bits(),
            _ => value == self.nodata,
        }
    }
}

/// Resample `src` onto `dst`, sampling each destination cell at its center.
///
/// Nearest selects the source cell containing the mapped point and preserves
/// the source dtype. Bilinear interpolates the four surrounding source cell
/// centers and always yields f32. Any lookup outside the source footprint,
/// or any nodata contributor, produces nodata.
pub fn resample(src: &Raster, dst: &GridSpec, method: Resampling) -> Result<Raster> {
    if src.grid.epsg != dst.epsg {
        return Err(Error::EpsgMismatch {
            src: src.grid.epsg,
            dst: dst.epsg,
        });
    }
    dst.validate()?;
    match method {
        Resampling::Nearest => resample_nearest(src, dst),
        Resampling::Bilinear => resample_bilinear(src, dst),
    }
}

fn resample_nearest(src: &Raster, dst: &GridSpec) -> Result<Raster> {
    let n = dst.height * dst.width;
    let mut lookup: Vec<Option<usize>> = Vec::with_capacity(n);
    for row in 0..dst.height {
        for col in 0..dst.width {
            let (x, y) = cell_center(dst, row as i64, col as i64);
            let (sr, sc) = world_to_pixel(&src.grid, x, y);
            lookup.push(if src.grid.in_bounds(sr, sc) {
                Some(sr as usize * src.grid.width + sc as usize)
            } else {
                None
            });
        }
    }
    let band_len = src.grid.height * src.grid.width;
    let samples = match &src.samples {
        Samples::U8(v) => Samples::U8(gather(v, &lookup, src.bands, band_len, src.nodata as u8)),
        Samples::U16(v) => Samples::U16(gather(v, &lookup, src.bands, band_len, src.nodata as u16)),
        Samples::F32(v) => Samples::F32(gather(v, &lookup, src.bands, band_len, src.nodata as f32)),
    };
    Raster::new(*dst, src.bands, src.nodata, samples)
}

fn gather<T: Copy>(
    src: &[T],
    lookup: &[Option<usize>],
    bands: usize,
    band_len: usize,
    fill: T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(bands * lookup.len());
    for band in 0..bands {
        let base = band * band_len;
        for slot in lookup {
            out.push(match slot {
                Some(i) => src[base + i],
                None => fill,
            });
        }
    }
    out
}

fn resample_bilinear(src: &Raster, dst: &GridSpec) -> Result<Raster> {
    let nodata_out = src.nodata as f32;
    let mut out = vec![0.0f32; src.bands * dst.height * dst.width];
    for band in 0..src.bands {
        for row in 0..dst.height {
            for col in 0..dst.width {
                let (x, y) = cell_center(dst, row as i64, col as i64);
                // Continuous source pixel coordinates; 0.0 is the center of
                // the first cell.
                let u = (x - src.grid.origin_x) / src.grid.pixel_width - 0.5;
                let v = (y - src.grid.origin_y) / src.grid.pixel_height - 0.5;
                let j0 = u.floor() as i64;
                let i0 = v.floor() as i64;
                let fu = u - j0 as f64;
                let fv = v - i0 as f64;

                let mut value = nodata_out;
                let corners = [
                    (i0, j0, (1.0 - fv) * (1.0 - fu)),
                    (i0, j0 + 1, (1.0 - fv) * fu),
                    (i0 + 1, j0, fv * (1.0 - fu)),
                    (i0 + 1, j0 + 1, fv * fu),
                ];
                if corners.iter().all(|&(i, j, _)| src.grid.in_bounds(i, j)) {
                    let mut acc = 0.0f64;
                    let mut ok = true;
                    for &(i, j, w) in &corners {
                        let s = src.get(band, i as usize, j as usize);
                        if src.is_nodata(s) {
                            ok = false;
                            break;
                        }
                        acc += w * s;
                    }
                    if ok {
                        value = acc as f32;
                    }
                }
                out[(band * dst.height + row as usize) * dst.width + col as usize] = value;
            }
        }
    }
    Raster::new(*dst, src.bands, src.nodata, Samples::F32(out))
}
