//! Planning: turn search results into a [`LazyCube`] and compile cubes
//! into content-addressed task graphs.
//!
//! Assembly uses two op kinds: `load_block` (fetch one band of one frame,
//! resample onto one spatial chunk's sub-grid) and `write_chunk` (order
//! blocks, concatenate, write the chunk file if its bytes changed). Quality
//! uses `mask_count` (per-chunk bit counts) and `mask_reduce` (sum). Ops
//! are pure functions of params + dep values; `write_chunk` and
//! `mask_reduce` are insensitive to dep order, which the identity hash
//! sorts anyway.
//!
//! Planning and graph construction fetch nothing; bytes move only when a
//! graph executes.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cube::store::{write_chunk_idempotent, CubeStore};
use crate::cube::{
    count_mask, resample_to_cube, CubeSchema, FrameKey, FrameSource, LazyCube, MaskCounts,
    MASK_INVALID,
};
use crate::error::{Error, Result};
use crate::graph::exec::{ExecReport, Executor};
use crate::graph::{OpRegistry, TaskGraph, TaskId, TaskValue};
use crate::grid::sgr;
use crate::grid::{Dtype, GridSpec, Resampling, Samples};
use crate::stac::StacItem;

pub const OP_LOAD_BLOCK: &str = "load_block";
pub const OP_WRITE_CHUNK: &str = "write_chunk";
pub const OP_MASK_COUNT: &str = "mask_count";
pub const OP_MASK_REDUCE: &str = "mask_reduce";

/// Shared state the cube ops close over: the fetcher (and its byte
/// counter) plus a counter of chunk files actually written, which stays
/// at zero when a satisfied plan is replayed.
#[derive(Clone)]
pub struct CubeEnv {
    pub fetcher: crate::stac::fetch::Fetcher,
    chunk_writes: Arc<AtomicU64>,
}

impl Default for CubeEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl CubeEnv {
    pub fn new() -> Self {
        Self::with_fetcher(crate::stac::fetch::Fetcher::new())
    }

    pub fn with_fetcher(fetcher: crate::stac::fetch::Fetcher) -> Self {
        CubeEnv {
            fetcher,
            chunk_writes: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Chunk files written (not skipped as up to date) so far.
    pub fn chunk_writes(&self) -> u64 {
        self.chunk_writes.load(Ordering::Relaxed)
    }

    /// Registry holding all four cube ops.
    pub fn registry(&self) -> Arc<OpRegistry> {
        let mut registry = OpRegistry::new();

        let fetcher = self.fetcher.clone();
        registry.register(OP_LOAD_BLOCK, move |params, _deps| {
            let p: LoadParams = serde_json::from_value(params.clone())?;
            let raster = sgr::read(&fetcher, &p.locator)?;
            let block = resample_to_cube(&raster, &p.grid, p.method, p.dtype, p.nodata)?;
            let mut bytes =
                Vec::with_capacity(8 + block.samples.len() * p.dtype.size());
            bytes.extend_from_slice(&(p.t as u32).to_le_bytes());
            bytes.extend_from_slice(&(p.b as u32).to_le_bytes());
            bytes.extend_from_slice(&sgr::encode_samples(&block.samples));
            Ok(TaskValue::Bytes(bytes.into()))
        });

        let writes = Arc::clone(&self.chunk_writes);
        registry.register(OP_WRITE_CHUNK, move |params, deps| {
            let p: WriteParams = serde_json::from_value(params.clone())?;
            let [tl, bl, yl, xl] = p.dims;
            let payload_len = yl * xl * p.dtype.size();
            if deps.len() != tl * bl {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} blocks for chunk {}", tl * bl, p.name),
                    found: format!("{}", deps.len()),
                });
            }
            let mut parts: Vec<(u32, u32, &[u8])> = Vec::with_capacity(deps.len());
            for dep in deps {
                let bytes = dep.as_bytes().ok_or_else(|| Error::InvalidRaster {
                    reason: format!("chunk {}: block dep is not bytes", p.name),
                })?;
                if bytes.len() != 8 + payload_len {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{} block bytes", 8 + payload_len),
                        found: format!("{}", bytes.len()),
                    });
                }
                let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
                let b = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
                parts.push((t, b, &bytes[8..]));
            }
            // (t, b) headers order the blocks; dep order is irrelevant.
            parts.sort_by_key(|&(t, b, _)| (t, b));
            let mut out = Vec::with_capacity(tl * bl * payload_len);
            for (_, _, payload) in parts {
                out.extend_from_slice(payload);
            }
            let written = write_chunk_idempotent(&Path::new(&p.dir).join(&p.name), &out)?;
            if written {
                writes.fetch_add(1, Ordering::Relaxed);
            }
            Ok(TaskValue::Json(
                serde_json::json!({ "name": p.name, "written": written }),
            ))
        });

        let fetcher = self.fetcher.clone();
        registry.register(OP_MASK_COUNT, move |params, _deps| {
            let p: MaskCountParams = serde_json::from_value(params.clone())?;
            let raster = sgr::read(&fetcher, &p.locator)?;
            if raster.samples.dtype() != Dtype::U8 {
                return Err(Error::BadMaskDtype {
                    item: p.item_id,
                    found: raster.samples.dtype().name().to_string(),
                });
            }
            let resampled = crate::grid::resample(&raster, &p.grid, Resampling::Nearest)?;
            let nodata = resampled.nodata;
            let mut values = match resampled.samples {
                Samples::U8(v) => v,
                _ => unreachable!("nearest preserves dtype"),
            };
            // Pixels the mask does not cover are unobserved: count invalid.
            for v in &mut values {
                if *v as f64 == nodata {
                    *v |= MASK_INVALID;
                }
            }
            Ok(TaskValue::Json(serde_json::to_value(count_mask(&values))?))
        });

        registry.register(OP_MASK_REDUCE, move |_params, deps| {
            let mut sum = MaskCounts::default();
            for dep in deps {
                let value = dep.as_json().ok_or_else(|| Error::InvalidRaster {
                    reason: "mask reduce dep is not counts".to_string(),
                })?;
                let counts: MaskCounts = serde_json::from_value(value.clone())?;
                sum.add(&counts);
            }
            Ok(TaskValue::Json(serde_json::to_value(sum)?))
        });

        Arc::new(registry)
    }
}

#[derive(Serialize, Deserialize)]
struct LoadParams {
    locator: String,
    method: Resampling,
    /// The spatial chunk's sub-grid; the block covers exactly this.
    grid: GridSpec,
    dtype: Dtype,
    nodata: f64,
    /// Global frame index, embedded in the block header.
    t: usize,
    /// Global band index, embedded in the block header.
    b: usize,
}

#[derive(Serialize, Deserialize)]
struct WriteParams {
    dir: String,
    name: String,
    /// Chunk dims [t, b, y, x] after edge truncation.
    dims: [usize; 4],
    dtype: Dtype,
}

#[derive(Serialize, Deserialize)]
struct MaskCountParams {
    locator: String,
    item_id: String,
    /// The spatial chunk's sub-grid.
    grid: GridSpec,
    frame: usize,
}

/// Radiometric policy for a planned cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    pub method: Resampling,
    pub dtype: Dtype,
    pub nodata: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            method: Resampling::Nearest,
            dtype: Dtype::U16,
            nodata: 0.0,
        }
    }
}

/// Plan a cube over search results: one frame per item carrying every
/// requested band; items missing some (but not all missing) bands are
/// dropped and recorded. Fetches nothing.
pub fn plan_cube(
    items: &[StacItem],
    grid: &GridSpec,
    bands: &[String],
    chunk: [usize; 4],
    opts: &PlanOptions,
) -> Result<LazyCube> {
    if items.is_empty() {
        return Err(Error::EmptySearch);
    }
    for band in bands {
        if !items.iter().any(|item| item.data_asset(band).is_some()) {
            return Err(Error::BandMissingEverywhere { band: band.clone() });
        }
    }
    let mut sources: Vec<FrameSource> = Vec::new();
    let mut dropped: Vec<String> = Vec::new();
    for item in items {
        let assets: Option<BTreeMap<String, (String, Resampling)>> = bands
            .iter()
            .map(|band| {
                item.data_asset(band)
                    .map(|a| (band.clone(), (item.resolve(a), opts.method)))
            })
            .collect();
        match assets {
            Some(bands) => sources.push(FrameSource {
                key: FrameKey {
                    datetime: item.datetime,
                    id: item.id.clone(),
                },
                bands,
                quality: item.quality_asset().map(|a| item.resolve(a)),
            }),
            None => dropped.push(item.id.clone()),
        }
    }
    if sources.is_empty() {
        return Err(Error::NoFramesSurvive {
            reason: format!(
                "none of the {} items carry all requested bands {:?}",
                items.len(),
                bands
            ),
        });
    }
    sources.sort_by(|a, b| a.key.cmp(&b.key));
    let schema = CubeSchema {
        frames: sources.iter().map(|s| s.key.clone()).collect(),
        bands: bands.to_vec(),
        grid: *grid,
        dtype: opts.dtype,
        nodata: opts.nodata,
        chunk,
    };
    schema.validate()?;
    Ok(LazyCube {
        schema,
        sources,
        dropped,
    })
}

/// Compile a cube into its assembly graph: one `load_block` per
/// (frame, band, spatial chunk) and one `write_chunk` per chunk, the
/// latter depending on the loads its chunk consumes. Shared spatial
/// chunks dedupe by content address.
pub fn build_graph(env: &CubeEnv, store_root: &Path, lazy: &LazyCube) -> Result<TaskGraph> {
    let schema = &lazy.schema;
    schema.validate()?;
    let mut graph = TaskGraph::new(env.registry());
    let counts = schema.chunk_counts();
    let dir = store_root.display().to_string();

    // Load tasks, keyed by (frame, band, spatial chunk).
    let mut loads: BTreeMap<(usize, usize, usize, usize), TaskId> = BTreeMap::new();
    for yi in 0..counts[2] {
        for xi in 0..counts[3] {
            let (y0, ylen) = schema.chunk_extent(2, yi);
            let (x0, xlen) = schema.chunk_extent(3, xi);
            let sub_grid = schema.grid.window(y0, x0, ylen, xlen)?;
            for (t, source) in lazy.sources.iter().enumerate() {
                for (b, band) in schema.bands.iter().enumerate() {
                    let (locator, method) =
                        source.bands.get(band).ok_or_else(|| Error::UnknownBand {
                            band: band.clone(),
                        })?;
                    let params = serde_json::to_value(LoadParams {
                        locator: locator.clone(),
                        method: *method,
                        grid: sub_grid,
                        dtype: schema.dtype,
                        nodata: schema.nodata,
                        t,
                        b,
                    })?;
                    let id = graph.add_task(OP_LOAD_BLOCK, params, Vec::new())?;
                    loads.insert((t, b, yi, xi), id);
                }
            }
        }
    }

    for [ti, bi, yi, xi] in schema.chunk_indices() {
        let (t0, tl) = schema.chunk_extent(0, ti);
        let (b0, bl) = schema.chunk_extent(1, bi);
        let (_, yl) = schema.chunk_extent(2, yi);
        let (_, xl) = schema.chunk_extent(3, xi);
        let mut deps = Vec::with_capacity(tl * bl);
        for t in t0..t0 + tl {
            for b in b0..b0 + bl {
                deps.push(loads[&(t, b, yi, xi)].clone());
            }
        }
        let params = serde_json::to_value(WriteParams {
            dir: dir.clone(),
            name: CubeSchema::chunk_name(ti, bi, yi, xi),
            dims: [tl, bl, yl, xl],
            dtype: schema.dtype,
        })?;
        graph.add_task(OP_WRITE_CHUNK, params, deps)?;
    }
    Ok(graph)
}

/// Compile the quality graph: per frame, one `mask_count` per spatial
/// chunk plus one `mask_reduce`. Returns the reduce ids aligned with
/// `lazy.schema.frames`. Every frame must carry a quality mask.
pub fn quality_graph(env: &CubeEnv, lazy: &LazyCube) -> Result<(TaskGraph, Vec<TaskId>)> {
    let schema = &lazy.schema;
    let mut graph = TaskGraph::new(env.registry());
    let counts = schema.chunk_counts();
    let mut reduce_ids = Vec::with_capacity(lazy.sources.len());
    for (t, source) in lazy.sources.iter().enumerate() {
        let locator = source
            .quality
            .as_ref()
            .ok_or_else(|| Error::MissingQualityAsset {
                item: source.key.id.clone(),
            })?;
        let mut deps = Vec::with_capacity(counts[2] * counts[3]);
        for yi in 0..counts[2] {
            for xi in 0..counts[3] {
                let (y0, ylen) = schema.chunk_extent(2, yi);
                let (x0, xlen) = schema.chunk_extent(3, xi);
                let params = serde_json::to_value(MaskCountParams {
                    locator: locator.clone(),
                    item_id: source.key.id.clone(),
                    grid: schema.grid.window(y0, x0, ylen, xlen)?,
                    frame: t,
                })?;
                deps.push(graph.add_task(OP_MASK_COUNT, params, Vec::new())?);
            }
        }
        let reduce = graph.add_task(
            OP_MASK_REDUCE,
            serde_json::json!({ "frame": t }),
            deps,
        )?;
        reduce_ids.push(reduce);
    }
    Ok((graph, reduce_ids))
}

/// Execute the assembly graph into a store directory, then verify the
/// inventory and write metadata last. Idempotent: rerunning over an intact
/// store writes no chunk files.
pub fn write_store(
    env: &CubeEnv,
    lazy: &LazyCube,
    path: &Path,
    workers: usize,
) -> Result<(CubeStore, ExecReport)> {
    let executor = Executor::new(workers).bytes_counter(env.fetcher.bytes_counter());
    write_store_with(env, lazy, path, &executor)
}

/// [`write_store`] with a caller-configured executor (progress, retries).
pub fn write_store_with(
    env: &CubeEnv,
    lazy: &LazyCube,
    path: &Path,
    executor: &Executor,
) -> Result<(CubeStore, ExecReport)> {
    lazy.schema.validate()?;
    if let Some(existing) = CubeStore::existing_schema(path)? {
        if existing != lazy.schema {
            return Err(Error::SchemaMismatch {
                path: path.display().to_string(),
            });
        }
    }
    std::fs::create_dir_all(path)?;
    let graph = build_graph(env, path, lazy)?;
    let (_, report) = executor.run(&graph);
    if let Some(err) = report.first_failure(&graph) {
        return Err(err);
    }
    let store = CubeStore::finalize(path, &lazy.schema)?;
    Ok((store, report))
}
