//! Lazy 4-D datacubes: schema planning over search results, on-demand
//! window materialization, per-frame quality via map+reduce tasks, frame
//! filtering, and a chunked on-disk store.
//!
//! A cube is indexed (t, band, y, x) on a single target grid; the chunk
//! shape (ct, cb, cy, cx) is the unit of storage and task granularity.

pub mod plan;
pub mod store;

use std::collections::BTreeMap;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dtype, GridSpec, Raster, Resampling, Samples};
use crate::stac::fetch::Fetcher;

pub use plan::{build_graph, plan_cube, CubeEnv, PlanOptions};
pub use store::{store_content_hash, CubeStore, FORMAT_VERSION};

/// Default quality-filter thresholds.
pub const DEFAULT_MAX_CLOUD: f64 = 0.5;
pub const DEFAULT_MIN_VALID: f64 = 0.25;

/// Quality mask bits (u8 masks): bit0 = invalid/artifact, bit1 = cloud.
pub const MASK_INVALID: u8 = 0b01;
pub const MASK_CLOUD: u8 = 0b10;

/// Identity of one cube frame.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FrameKey {
    pub datetime: DateTime<Utc>,
    pub id: String,
}

impl FrameKey {
    pub fn rfc3339(&self) -> String {
        self.datetime.to_rfc3339_opts(SecondsFormat::Secs, true)
    }
}

/// Shape and layout of a cube; everything needed to address its chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeSchema {
    /// Strictly ascending by (datetime, id).
    pub frames: Vec<FrameKey>,
    pub bands: Vec<String>,
    pub grid: GridSpec,
    pub dtype: Dtype,
    pub nodata: f64,
    /// (ct, cb, cy, cx); dims larger than the cube clip at the edges.
    pub chunk: [usize; 4],
}

impl CubeSchema {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidSchema {
                reason: "no frames".to_string(),
            });
        }
        for pair in self.frames.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidSchema {
                    reason: format!(
                        "frames not strictly ascending at ({}, {})",
                        pair[1].rfc3339(),
                        pair[1].id
                    ),
                });
            }
        }
        if self.bands.is_empty() {
            return Err(Error::InvalidSchema {
                reason: "no bands".to_string(),
            });
        }
        for (i, band) in self.bands.iter().enumerate() {
            if self.bands[..i].contains(band) {
                return Err(Error::InvalidSchema {
                    reason: format!("duplicate band {band:?}"),
                });
            }
        }
        self.grid.validate()?;
        if self.chunk.iter().any(|&c| c == 0) {
            return Err(Error::InvalidSchema {
                reason: format!("chunk dims must be positive, got {:?}", self.chunk),
            });
        }
        Ok(())
    }

    /// Cube dims: [frames, bands, height, width].
    pub fn shape(&self) -> [usize; 4] {
        [
            self.frames.len(),
            self.bands.len(),
            self.grid.height,
            self.grid.width,
        ]
    }

    /// Number of chunks along each axis.
    pub fn chunk_counts(&self) -> [usize; 4] {
        let shape = self.shape();
        let mut counts = [0; 4];
        for i in 0..4 {
            counts[i] = shape[i].div_ceil(self.chunk[i]);
        }
        counts
    }

    /// (start, len) of a chunk along one axis, truncated at the edge.
    pub fn chunk_extent(&self, axis: usize, index: usize) -> (usize, usize) {
        let start = index * self.chunk[axis];
        let len = self.chunk[axis].min(self.shape()[axis] - start);
        (start, len)
    }

    pub fn chunk_name(ti: usize, bi: usize, yi: usize, xi: usize) -> String {
        format!("c.{ti}.{bi}.{yi}.{xi}.bin")
    }

    /// All chunk indices in (t, b, y, x) order.
    pub fn chunk_indices(&self) -> Vec<[usize; 4]> {
        let counts = self.chunk_counts();
        let mut out = Vec::with_capacity(counts.iter().product());
        for ti in 0..counts[0] {
            for bi in 0..counts[1] {
                for yi in 0..counts[2] {
                    for xi in 0..counts[3] {
                        out.push([ti, bi, yi, xi]);
                    }
                }
            }
        }
        out
    }

    pub fn band_index(&self, band: &str) -> Result<usize> {
        self.bands
            .iter()
            .position(|b| b == band)
            .ok_or_else(|| Error::UnknownBand {
                band: band.to_string(),
            })
    }
}

/// A materialized sub-array, row-major in (t, band, y, x) order.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeArray {
    /// [t, bands, y, x]
    pub shape: [usize; 4],
    pub samples: Samples,
    pub nodata: f64,
}

impl CubeArray {
    pub fn new(shape: [usize; 4], samples: Samples, nodata: f64) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if samples.len() != expect {
            return Err(Error::ShapeMismatch {
                expected: format!("{expect} samples for shape {shape:?}"),
                found: format!("{}", samples.len()),
            });
        }
        Ok(CubeArray {
            shape,
            samples,
            nodata,
        })
    }

    pub fn dtype(&self) -> Dtype {
        self.samples.dtype()
    }

    pub fn index(&self, t: usize, b: usize, y: usize, x: usize) -> usize {
        ((t * self.shape[1] + b) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn get(&self, t: usize, b: usize, y: usize, x: usize) -> f64 {
        let i = self.index(t, b, y, x);
        match &self.samples {
            Samples::U8(v) => v[i] as f64,
            Samples::U16(v) => v[i] as f64,
            Samples::F32(v) => v[i] as f64,
        }
    }

    pub fn is_nodata(&self, value: f64) -> bool {
        match self.samples.dtype() {
            Dtype::F32 => (value as f32).to_bits() == (self.nodata as f32).to_bits(),
            _ => value == self.nodata,
        }
    }

    /// Per-sample validity (not nodata), aligned with the sample order.
    pub fn validity(&self) -> Vec<bool> {
        let check = |v: f64| !self.is_nodata(v);
        match &self.samples {
            Samples::U8(v) => v.iter().map(|&s| check(s as f64)).collect(),
            Samples::U16(v) => v.iter().map(|&s| check(s as f64)).collect(),
            Samples::F32(v) => v.iter().map(|&s| check(s as f64)).collect(),
        }
    }
}

/// Copy the block at `offsets`/`lens` out of a full array of `shape`.
pub(crate) fn extract_block(
    samples: &Samples,
    shape: [usize; 4],
    offsets: [usize; 4],
    lens: [usize; 4],
) -> Samples {
    let mut map = Vec::with_capacity(lens.iter().product());
    for t in 0..lens[0] {
        for b in 0..lens[1] {
            for y in 0..lens[2] {
                let row_start = ((((offsets[0] + t) * shape[1] + offsets[1] + b) * shape[2])
                    + offsets[2]
                    + y)
                    * shape[3]
                    + offsets[3];
                map.push(row_start);
            }
        }
    }
    fn gather_rows<T: Copy>(src: &[T], starts: &[usize], row_len: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(starts.len() * row_len);
        for &s in starts {
            out.extend_from_slice(&src[s..s + row_len]);
        }
        out
    }
    match samples {
        Samples::U8(v) => Samples::U8(gather_rows(v, &map, lens[3])),
        Samples::U16(v) => Samples::U16(gather_rows(v, &map, lens[3])),
        Samples::F32(v) => Samples::F32(gather_rows(v, &map, lens[3])),
    }
}

/// Per-band source of one frame.
#[derive(Debug, Clone)]
pub struct FrameSource {
    pub key: FrameKey,
    /// band name -> (resolved asset locator, resample method)
    pub bands: BTreeMap<String, (String, Resampling)>,
    /// Resolved quality-mask locator, when the item carries one.
    pub quality: Option<String>,
}

/// A planned cube: schema plus per-frame sources. Holds no pixel data.
#[derive(Debug, Clone)]
pub struct LazyCube {
    pub schema: CubeSchema,
    /// Aligned with `schema.frames`.
    pub sources: Vec<FrameSource>,
    /// Ids of items dropped at planning time for lacking a requested band.
    pub dropped: Vec<String>,
}

impl LazyCube {
    /// Materialize a window directly from the frame sources: only the
    /// (frame, band) assets intersecting the window are fetched, each
    /// resampled straight onto the window's sub-grid.
    pub fn read_window(
        &self,
        fetcher: &Fetcher,
        t_range: std::ops::Range<usize>,
        bands: &[String],
        y_range: std::ops::Range<usize>,
        x_range: std::ops::Range<usize>,
    ) -> Result<CubeArray> {
        let schema = &self.schema;
        check_window(schema, &t_range, bands, &y_range, &x_range)?;
        let window_grid = schema.grid.window(
            y_range.start,
            x_range.start,
            y_range.len(),
            x_range.len(),
        )?;
        let shape = [t_range.len(), bands.len(), y_range.len(), x_range.len()];
        let mut arrays: Vec<Samples> = Vec::with_capacity(shape[0] * shape[1]);
        for t in t_range.clone() {
            let source = &self.sources[t];
            for band in bands {
                let (locator, method) = source.bands.get(band).ok_or_else(|| Error::UnknownBand {
                    band: band.clone(),
                })?;
                let raster = crate::grid::sgr::read(fetcher, locator)?;
                let block =
                    resample_to_cube(&raster, &window_grid, *method, schema.dtype, schema.nodata)?;
                arrays.push(block.samples);
            }
        }
        let samples = concat_samples(schema.dtype, &arrays);
        CubeArray::new(shape, samples, schema.nodata)
    }
}

/// Resample a source raster onto a cube sub-grid and convert to the cube's
/// dtype, mapping source nodata (and out-of-footprint fills) to the cube's
/// nodata value.
pub(crate) fn resample_to_cube(
    src: &Raster,
    dst_grid: &GridSpec,
    method: Resampling,
    dtype: Dtype,
    nodata: f64,
) -> Result<Raster> {
    let resampled = crate::grid::resample(src, dst_grid, method)?;
    convert_raster(&resampled, dtype, nodata)
}

/// Convert sample dtype, remapping the nodata sentinel. Valid values are
/// cast with saturation for integer targets.
pub(crate) fn convert_raster(src: &Raster, dtype: Dtype, nodata: f64) -> Result<Raster> {
    let n = src.samples.len();
    let value_at = |i: usize| -> f64 {
        match &src.samples {
            Samples::U8(v) => v[i] as f64,
            Samples::U16(v) => v[i] as f64,
            Samples::F32(v) => v[i] as f64,
        }
    };
    let samples = match dtype {
        Dtype::U8 => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let v = value_at(i);
                out.push(if src.is_nodata(v) {
                    nodata as u8
                } else {
                    v.clamp(0.0, 255.0) as u8
                });
            }
            Samples::U8(out)
        }
        Dtype::U16 => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let v = value_at(i);
                out.push(if src.is_nodata(v) {
                    nodata as u16
                } else {
                    v.clamp(0.0, 65535.0) as u16
                });
            }
            Samples::U16(out)
        }
        Dtype::F32 => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let v = value_at(i);
                out.push(if src.is_nodata(v) { nodata as f32 } else { v as f32 });
            }
            Samples::F32(out)
        }
    };
    Raster::new(src.grid, src.bands, nodata, samples)
}

pub(crate) fn concat_samples(dtype: Dtype, parts: &[Samples]) -> Samples {
    match dtype {
        Dtype::U8 => Samples::U8(
            parts
                .iter()
                .flat_map(|s| match s {
                    Samples::U8(v) => v.iter().copied(),
                    _ => unreachable!("dtype fixed by schema"),
                })
                .collect(),
        ),
        Dtype::U16 => Samples::U16(
            parts
                .iter()
                .flat_map(|s| match s {
                    Samples::U16(v) => v.iter().copied(),
                    _ => unreachable!("dtype fixed by schema"),
                })
                .collect(),
        ),
        Dtype::F32 => Samples::F32(
            parts
                .iter()
                .flat_map(|s| match s {
                    Samples::F32(v) => v.iter().copied(),
                    _ => unreachable!("dtype fixed by schema"),
                })
                .collect(),
        ),
    }
}

/// Validate a read window against a schema.
pub(crate) fn check_window(
    schema: &CubeSchema,
    t_range: &std::ops::Range<usize>,
    bands: &[String],
    y_range: &std::ops::Range<usize>,
    x_range: &std::ops::Range<usize>,
) -> Result<()> {
    let shape = schema.shape();
    let checks = [
        ("time", t_range, shape[0]),
        ("y", y_range, shape[2]),
        ("x", x_range, shape[3]),
    ];
    for (what, range, size) in checks {
        if range.is_empty() {
            return Err(Error::EmptyRange { what });
        }
        if range.end > size {
            return Err(Error::WindowOutOfBounds {
                what,
                start: range.start,
                end: range.end,
                size,
            });
        }
    }
    if bands.is_empty() {
        return Err(Error::EmptyRange { what: "band" });
    }
    for band in bands {
        schema.band_index(band)?;
    }
    Ok(())
}

/// Per-frame quality statistics derived from the frame's mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameQuality {
    pub valid_fraction: f64,
    pub cloud_fraction: f64,
}

/// Raw mask pixel counts; the map+reduce payload.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskCounts {
    pub total: u64,
    /// bit0 clear
    pub valid: u64,
    /// bit0 clear and bit1 set
    pub cloudy: u64,
}

impl MaskCounts {
    pub fn add(&mut self, other: &MaskCounts) {
        self.total += other.total;
        self.valid += other.valid;
        self.cloudy += other.cloudy;
    }

    pub fn quality(&self) -> FrameQuality {
        let valid_fraction = if self.total == 0 {
            0.0
        } else {
            self.valid as f64 / self.total as f64
        };
        let cloud_fraction = if self.valid == 0 {
            0.0
        } else {
            self.cloudy as f64 / self.valid as f64
        };
        FrameQuality {
            valid_fraction,
            cloud_fraction,
        }
    }
}

/// Count mask bits over raw u8 mask values.
pub fn count_mask(values: &[u8]) -> MaskCounts {
    let mut counts = MaskCounts {
        total: values.len() as u64,
        ..Default::default()
    };
    for &v in values {
        if v & MASK_INVALID == 0 {
            counts.valid += 1;
            if v & MASK_CLOUD != 0 {
                counts.cloudy += 1;
            }
        }
    }
    counts
}

/// Compute per-frame quality by executing a map (per-chunk counts) +
/// reduce (sum) task graph over the cube's quality sources.
pub fn frame_quality(env: &CubeEnv, cube: &LazyCube, workers: usize) -> Result<Vec<FrameQuality>> {
    let (graph, reduce_ids) = plan::quality_graph(env, cube)?;
    let executor = crate::graph::exec::Executor::new(workers)
        .bytes_counter(env.fetcher.bytes_counter());
    let (results, report) = executor.run(&graph);
    if let Some(err) = report.first_failure(&graph) {
        return Err(err);
    }
    reduce_ids
        .iter()
        .map(|id| {
            let value = results[id].as_json().expect("reduce yields counts");
            let counts: MaskCounts = serde_json::from_value(value.clone())?;
            Ok(counts.quality())
        })
        .collect()
}

/// Keep frames passing both thresholds; relative order is preserved and
/// the schema updated consistently.
pub fn filter_frames(
    cube: &LazyCube,
    qualities: &[FrameQuality],
    max_cloud: f64,
    min_valid: f64,
) -> Result<LazyCube> {
    assert_eq!(
        qualities.len(),
        cube.schema.frames.len(),
        "qualities aligned with frames"
    );
    let keep: Vec<usize> = qualities
        .iter()
        .enumerate()
        .filter(|(_, q)| q.cloud_fraction <= max_cloud && q.valid_fraction >= min_valid)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::AllFramesFiltered {
            max_cloud,
            min_valid,
        });
    }
    let mut schema = cube.schema.clone();
    schema.frames = keep.iter().map(|&i| cube.schema.frames[i].clone()).collect();
    let sources = keep.iter().map(|&i| cube.sources[i].clone()).collect();
    Ok(LazyCube {
        schema,
        sources,
        dropped: cube.dropped.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(secs: i64, id: &str) -> FrameKey {
        FrameKey {
            datetime: DateTime::<Utc>::from_timestamp(secs, 0).unwrap(),
            id: id.to_string(),
        }
    }

    pub(crate) fn toy_schema() -> CubeSchema {
        CubeSchema {
            frames: vec![key(0, "a"), key(100, "b"), key(200, "c"), key(300, "d")],
            bands: vec!["red".to_string(), "nir".to_string()],
            grid: GridSpec::new(4326, 0.0, 16.0, 1.0, -1.0, 16, 16).unwrap(),
            dtype: Dtype::U16,
            nodata: 0.0,
            chunk: [2, 1, 8, 8],
        }
    }

    #[test]
    fn schema_validation() {
        let mut s = toy_schema();
        s.validate().unwrap();
        s.frames = vec![key(100, "b"), key(0, "a")];
        assert!(matches!(s.validate(), Err(Error::InvalidSchema { .. })));
        let mut s = toy_schema();
        s.bands = vec!["red".to_string(), "red".to_string()];
        assert!(matches!(s.validate(), Err(Error::InvalidSchema { .. })));
        let mut s = toy_schema();
        s.chunk = [0, 1, 8, 8];
        assert!(matches!(s.validate(), Err(Error::InvalidSchema { .. })));
        // Same instant, distinct ids: ascending by the (datetime, id) pair.
        let mut s = toy_schema();
        s.frames = vec![key(0, "a"), key(0, "b")];
        s.validate().unwrap();
    }

    #[test]
    fn chunk_geometry() {
        let s = toy_schema();
        assert_eq!(s.shape(), [4, 2, 16, 16]);
        assert_eq!(s.chunk_counts(), [2, 2, 2, 2]);
        assert_eq!(s.chunk_indices().len(), 16);
        assert_eq!(s.chunk_extent(0, 1), (2, 2));
        assert_eq!(CubeSchema::chunk_name(0, 1, 0, 1), "c.0.1.0.1.bin");

        // Truncated edges: 3 frames with ct = 2.
        let mut s3 = toy_schema();
        s3.frames.pop();
        assert_eq!(s3.chunk_counts()[0], 2);
        assert_eq!(s3.chunk_extent(0, 1), (2, 1));
    }

    #[test]
    fn extract_block_matches_naive_slicing() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let shape = [3usize, 2, 5, 7];
        let n: usize = shape.iter().product();
        let data: Vec<u16> = (0..n).map(|_| rng.gen()).collect();
        let samples = Samples::U16(data.clone());
        for _ in 0..20 {
            let offsets = [
                rng.gen_range(0..shape[0]),
                rng.gen_range(0..shape[1]),
                rng.gen_range(0..shape[2]),
                rng.gen_range(0..shape[3]),
            ];
            let lens = [
                rng.gen_range(1..=shape[0] - offsets[0]),
                rng.gen_range(1..=shape[1] - offsets[1]),
                rng.gen_range(1..=shape[2] - offsets[2]),
                rng.gen_range(1..=shape[3] - offsets[3]),
            ];
            let block = extract_block(&samples, shape, offsets, lens);
            let mut expect = Vec::new();
            for t in 0..lens[0] {
                for b in 0..lens[1] {
                    for y in 0..lens[2] {
                        for x in 0..lens[3] {
                            let i = (((offsets[0] + t) * shape[1] + offsets[1] + b) * shape[2]
                                + offsets[2]
                                + y)
                                * shape[3]
                                + offsets[3]
                                + x;
                            expect.push(data[i]);
                        }
                    }
                }
            }
            assert_eq!(block, Samples::U16(expect));
        }
    }

    #[test]
    fn mask_counts_definitions() {
        // All-zero mask: fully valid, no cloud.
        let q = count_mask(&[0; 100]).quality();
        assert_eq!(q.valid_fraction, 1.0);
        assert_eq!(q.cloud_fraction, 0.0);

        // Entirely bit0-set: invalid everywhere, cloud fraction pinned to 0.
        let q = count_mask(&[MASK_INVALID; 50]).quality();
        assert_eq!(q.valid_fraction, 0.0);
        assert_eq!(q.cloud_fraction, 0.0);

        // Half cloudy among the valid pixels.
        let mut mask = vec![0u8; 10];
        mask[0] = MASK_CLOUD;
        mask[1] = MASK_CLOUD;
        mask[2] = MASK_INVALID | MASK_CLOUD; // invalid, cloud bit ignored
        mask[3] = MASK_INVALID;
        let counts = count_mask(&mask);
        assert_eq!(counts, MaskCounts { total: 10, valid: 8, cloudy: 2 });
        let q = counts.quality();
        assert_eq!(q.valid_fraction, 0.8);
        assert_eq!(q.cloud_fraction, 0.25);
    }

    #[test]
    fn count_mask_matches_naive_oracle_on_random_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let mask: Vec<u8> = (0..256).map(|_| rng.gen()).collect();
            let got = count_mask(&mask);
            let mut expect = MaskCounts { total: 256, ..Default::default() };
            for &v in &mask {
                let invalid = v % 2 == 1;
                if !invalid {
                    expect.valid += 1;
                    if (v / 2) % 2 == 1 {
                        expect.cloudy += 1;
                    }
                }
            }
            assert_eq!(got, expect);
        }
    }

    fn toy_lazy(n: usize) -> LazyCube {
        let frames: Vec<FrameKey> = (0..n).map(|i| key(i as i64 * 100, &format!("f{i}"))).collect();
        let sources: Vec<FrameSource> = frames
            .iter()
            .map(|k| FrameSource {
                key: k.clone(),
                bands: BTreeMap::new(),
                quality: None,
            })
            .collect();
        let mut schema = toy_schema();
        schema.frames = frames;
        schema.bands = vec!["red".to_string()];
        LazyCube {
            schema,
            sources,
            dropped: Vec::new(),
        }
    }

    #[test]
    fn filter_keeps_predicate_set_and_is_idempotent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let n = rng.gen_range(1..20);
            let cube = toy_lazy(n);
            let qualities: Vec<FrameQuality> = (0..n)
                .map(|_| FrameQuality {
                    valid_fraction: rng.gen_range(0.0..=1.0),
                    cloud_fraction: rng.gen_range(0.0..=1.0),
                })
                .collect();
            let max_cloud = rng.gen_range(0.0..=1.0);
            let min_valid = rng.gen_range(0.0..=1.0);

            let expect: Vec<String> = (0..n)
                .filter(|&i| {
                    qualities[i].cloud_fraction <= max_cloud
                        && qualities[i].valid_fraction >= min_valid
                })
                .map(|i| cube.schema.frames[i].id.clone())
                .collect();

            match filter_frames(&cube, &qualities, max_cloud, min_valid) {
                Ok(filtered) => {
                    let got: Vec<String> =
                        filtered.schema.frames.iter().map(|f| f.id.clone()).collect();
                    assert_eq!(got, expect);
                    assert_eq!(filtered.sources.len(), filtered.schema.frames.len());
                    // Idempotent: the kept frames all pass the thresholds.
                    let kept_q: Vec<FrameQuality> = (0..n)
                        .filter(|&i| expect.contains(&cube.schema.frames[i].id))
                        .map(|i| qualities[i])
                        .collect();
                    let twice = filter_frames(&filtered, &kept_q, max_cloud, min_valid).unwrap();
                    let got2: Vec<String> =
                        twice.schema.frames.iter().map(|f| f.id.clone()).collect();
                    assert_eq!(got2, got);
                }
                Err(Error::AllFramesFiltered { .. }) => assert!(expect.is_empty()),
                Err(other) => panic!("unexpected error {other:?}"),
            }
        }
    }

    #[test]
    fn strict_thresholds_keep_only_perfect_frames() {
        let cube = toy_lazy(3);
        let qualities = vec![
            FrameQuality { valid_fraction: 1.0, cloud_fraction: 0.0 },
            FrameQuality { valid_fraction: 1.0, cloud_fraction: 0.01 },
            FrameQuality { valid_fraction: 0.99, cloud_fraction: 0.0 },
        ];
        let filtered = filter_frames(&cube, &qualities, 0.0, 1.0).unwrap();
        assert_eq!(filtered.schema.frames.len(), 1);
        assert_eq!(filtered.schema.frames[0].id, "f0");
    }

    #[test]
    fn all_pass_is_identity() {
        let cube = toy_lazy(4);
        let qualities = vec![FrameQuality { valid_fraction: 1.0, cloud_fraction: 0.0 }; 4];
        let filtered =
            filter_frames(&cube, &qualities, DEFAULT_MAX_CLOUD, DEFAULT_MIN_VALID).unwrap();
        assert_eq!(filtered.schema, cube.schema);
    }
}
