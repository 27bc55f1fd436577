//! Chunked on-disk cube store, format `smartcube/1`: a directory holding
//! `cube.json` plus one raw little-endian file per chunk. Edge chunks are
//! truncated, never padded; missing chunk files are hard errors. Metadata
//! is written last, after every chunk exists.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cube::{check_window, extract_block, CubeArray, CubeSchema, FrameKey};
use crate::error::{Error, Result};
use crate::grid::sgr::{decode_samples, encode_samples};
use crate::grid::{Dtype, GridSpec, Samples};
use crate::stac::parse_datetime;

pub const FORMAT_VERSION: &str = "smartcube/1";
pub const META_NAME: &str = "cube.json";

/// The on-disk metadata document (exact keys).
#[derive(Serialize, Deserialize)]
struct MetaDoc {
    format_version: String,
    /// [[rfc3339, item_id], ...]
    frames: Vec<(String, String)>,
    bands: Vec<String>,
    grid: GridSpec,
    dtype: Dtype,
    nodata: f64,
    /// [ct, cb, cy, cx]
    chunk: [usize; 4],
}

impl MetaDoc {
    fn of(schema: &CubeSchema) -> MetaDoc {
        MetaDoc {
            format_version: FORMAT_VERSION.to_string(),
            frames: schema
                .frames
                .iter()
                .map(|f| (f.rfc3339(), f.id.clone()))
                .collect(),
            bands: schema.bands.clone(),
            grid: schema.grid,
            dtype: schema.dtype,
            nodata: schema.nodata,
            chunk: schema.chunk,
        }
    }

    fn into_schema(self, path: &Path) -> Result<CubeSchema> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version,
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let frames = self
            .frames
            .into_iter()
            .map(|(dt, id)| {
                let datetime = parse_datetime(&dt).map_err(|e| Error::InvalidSchema {
                    reason: format!("{}: frame {id}: {e}", path.display()),
                })?;
                Ok(FrameKey { datetime, id })
            })
            .collect::<Result<Vec<_>>>()?;
        let schema = CubeSchema {
            frames,
            bands: self.bands,
            grid: self.grid,
            dtype: self.dtype,
            nodata: self.nodata,
            chunk: self.chunk,
        };
        schema.validate()?;
        Ok(schema)
    }
}

/// An opened (or just written) store.
#[derive(Debug)]
pub struct CubeStore {
    pub path: PathBuf,
    pub schema: CubeSchema,
    chunk_reads: Arc<AtomicU64>,
}

impl CubeStore {
    fn meta_path(path: &Path) -> PathBuf {
        path.join(META_NAME)
    }

    /// Parse the schema of an existing store, if its metadata exists.
    /// No inventory check; used to detect schema conflicts before writing.
    pub fn existing_schema(path: &Path) -> Result<Option<CubeSchema>> {
        let meta_path = Self::meta_path(path);
        if !meta_path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&meta_path)?;
        let doc: MetaDoc = serde_json::from_slice(&bytes)?;
        Ok(Some(doc.into_schema(path)?))
    }

    /// Open a store: parse + validate metadata and verify that every
    /// in-bounds chunk file exists.
    pub fn open(path: &Path) -> Result<CubeStore> {
        let meta_path = Self::meta_path(path);
        if !meta_path.exists() {
            return Err(Error::MissingMetadata {
                path: path.display().to_string(),
            });
        }
        let bytes = std::fs::read(&meta_path)?;
        let doc: MetaDoc = serde_json::from_slice(&bytes)?;
        let schema = doc.into_schema(path)?;
        let store = CubeStore {
            path: path.to_path_buf(),
            schema,
            chunk_reads: Arc::new(AtomicU64::new(0)),
        };
        store.check_inventory()?;
        Ok(store)
    }

    fn check_inventory(&self) -> Result<()> {
        for [ti, bi, yi, xi] in self.schema.chunk_indices() {
            let name = CubeSchema::chunk_name(ti, bi, yi, xi);
            if !self.path.join(&name).exists() {
                return Err(Error::MissingChunk {
                    path: self.path.display().to_string(),
                    name,
                });
            }
        }
        Ok(())
    }

    /// Verify the chunk inventory, then write metadata (always last).
    pub fn finalize(path: &Path, schema: &CubeSchema) -> Result<CubeStore> {
        schema.validate()?;
        let store = CubeStore {
            path: path.to_path_buf(),
            schema: schema.clone(),
            chunk_reads: Arc::new(AtomicU64::new(0)),
        };
        store.check_inventory()?;
        let mut bytes = serde_json::to_vec_pretty(&MetaDoc::of(schema))?;
        bytes.push(b'\n');
        std::fs::write(Self::meta_path(path), bytes)?;
        Ok(store)
    }

    /// Write a full in-memory array as a store: every chunk file, then the
    /// metadata. Refuses a path already holding a different schema.
    pub fn write_full(path: &Path, schema: &CubeSchema, samples: &Samples) -> Result<CubeStore> {
        schema.validate()?;
        let expect: usize = schema.shape().iter().product();
        if samples.len() != expect || samples.dtype() != schema.dtype {
            return Err(Error::ShapeMismatch {
                expected: format!("{expect} {} samples", schema.dtype.name()),
                found: format!("{} {} samples", samples.len(), samples.dtype().name()),
            });
        }
        if let Some(existing) = Self::existing_schema(path)? {
            if existing != *schema {
                return Err(Error::SchemaMismatch {
                    path: path.display().to_string(),
                });
            }
        }
        std::fs::create_dir_all(path)?;
        let shape = schema.shape();
        for [ti, bi, yi, xi] in schema.chunk_indices() {
            let (t0, tl) = schema.chunk_extent(0, ti);
            let (b0, bl) = schema.chunk_extent(1, bi);
            let (y0, yl) = schema.chunk_extent(2, yi);
            let (x0, xl) = schema.chunk_extent(3, xi);
            let block = extract_block(samples, shape, [t0, b0, y0, x0], [tl, bl, yl, xl]);
            write_chunk_idempotent(
                &path.join(CubeSchema::chunk_name(ti, bi, yi, xi)),
                &encode_samples(&block),
            )?;
        }
        Self::finalize(path, schema)
    }

    /// Chunk files this store has read since it was opened.
    pub fn chunks_read(&self) -> u64 {
        self.chunk_reads.load(Ordering::Relaxed)
    }

    /// Read a window; only chunk files whose index ranges intersect the
    /// window are opened.
    pub fn read_window(
        &self,
        t_range: Range<usize>,
        bands: &[String],
        y_range: Range<usize>,
        x_range: Range<usize>,
    ) -> Result<CubeArray> {
        let schema = &self.schema;
        check_window(schema, &t_range, bands, &y_range, &x_range)?;
        let band_indices: Vec<usize> = bands
            .iter()
            .map(|b| schema.band_index(b))
            .collect::<Result<Vec<_>>>()?;

        let [ct, cb, cy, cx] = schema.chunk;
        let ti_range = t_range.start / ct..(t_range.end - 1) / ct + 1;
        let yi_range = y_range.start / cy..(y_range.end - 1) / cy + 1;
        let xi_range = x_range.start / cx..(x_range.end - 1) / cx + 1;
        let bi_set: BTreeSet<usize> = band_indices.iter().map(|&b| b / cb).collect();

        let out_shape = [t_range.len(), bands.len(), y_range.len(), x_range.len()];
        let n_out: usize = out_shape.iter().product();
        let mut out = match schema.dtype {
            Dtype::U8 => Samples::U8(vec![0; n_out]),
            Dtype::U16 => Samples::U16(vec![0; n_out]),
            Dtype::F32 => Samples::F32(vec![0.0; n_out]),
        };

        for ti in ti_range {
            for &bi in &bi_set {
                for yi in yi_range.clone() {
                    for xi in xi_range.clone() {
                        let name = CubeSchema::chunk_name(ti, bi, yi, xi);
                        let bytes =
                            std::fs::read(self.path.join(&name)).map_err(|e| match e.kind() {
                                std::io::ErrorKind::NotFound => Error::MissingChunk {
                                    path: self.path.display().to_string(),
                                    name: name.clone(),
                                },
                                _ => Error::Io(e),
                            })?;
                        self.chunk_reads.fetch_add(1, Ordering::Relaxed);
                        let chunk = decode_samples(schema.dtype, &bytes)?;

                        let (t0, tl) = schema.chunk_extent(0, ti);
                        let (b0, bl) = schema.chunk_extent(1, bi);
                        let (y0, yl) = schema.chunk_extent(2, yi);
                        let (x0, xl) = schema.chunk_extent(3, xi);
                        if chunk.len() != tl * bl * yl * xl {
                            return Err(Error::InvalidSchema {
                                reason: format!(
                                    "chunk {name} has {} samples, expected {}",
                                    chunk.len(),
                                    tl * bl * yl * xl
                                ),
                            });
                        }

                        let ts = t_range.start.max(t0)..t_range.end.min(t0 + tl);
                        let ys = y_range.start.max(y0)..y_range.end.min(y0 + yl);
                        let xs = x_range.start.max(x0)..x_range.end.min(x0 + xl);
                        let row_len = xs.len();
                        let mut copies: Vec<(usize, usize)> = Vec::new();
                        for t in ts {
                            for (ob, &gb) in band_indices.iter().enumerate() {
                                if gb < b0 || gb >= b0 + bl {
                                    continue;
                                }
                                for y in ys.clone() {
                                    let src = (((t - t0) * bl + (gb - b0)) * yl + (y - y0)) * xl
                                        + (xs.start - x0);
                                    let dst = (((t - t_range.start) * out_shape[1] + ob)
                                        * out_shape[2]
                                        + (y - y_range.start))
                                        * out_shape[3]
                                        + (xs.start - x_range.start);
                                    copies.push((src, dst));
                                }
                            }
                        }
                        copy_rows(&chunk, &mut out, &copies, row_len);
                    }
                }
            }
        }
        CubeArray::new(out_shape, out, schema.nodata)
    }

    /// Convenience: the whole cube.
    pub fn read_full(&self) -> Result<CubeArray> {
        let shape = self.schema.shape();
        self.read_window(0..shape[0], &self.schema.bands.clone(), 0..shape[2], 0..shape[3])
    }
}

fn copy_rows(src: &Samples, dst: &mut Samples, copies: &[(usize, usize)], row_len: usize) {
    fn run<T: Copy>(src: &[T], dst: &mut [T], copies: &[(usize, usize)], row_len: usize) {
        for &(s, d) in copies {
            dst[d..d + row_len].copy_from_slice(&src[s..s + row_len]);
        }
    }
    match (src, dst) {
        (Samples::U8(s), Samples::U8(d)) => run(s, d, copies, row_len),
        (Samples::U16(s), Samples::U16(d)) => run(s, d, copies, row_len),
        (Samples::F32(s), Samples::F32(d)) => run(s, d, copies, row_len),
        _ => unreachable!("dtype fixed by schema"),
    }
}

/// Write chunk bytes only if the file is absent or differs; returns true
/// when bytes were written. Replaying a satisfied plan therefore performs
/// zero writes.
pub fn write_chunk_idempotent(path: &Path, bytes: &[u8]) -> std::io::Result<bool> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(true)
}

/// Content hash of a store directory: SHA-256 over every file (sorted
/// relative names), each contributing its name, a NUL, its length as u64
/// little-endian, and its bytes.
pub fn store_content_hash(path: &Path) -> Result<String> {
    let mut names = Vec::new();
    collect_files(path, Path::new(""), &mut names)?;
    names.sort();
    let mut hasher = Sha256::new();
    for name in names {
        let bytes = std::fs::read(path.join(&name))?;
        hasher.update(name.replace('\\', "/").as_bytes());
        hasher.update([0u8]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(root: &Path, rel: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(root.join(rel))? {
        let entry = entry?;
        let rel_path = rel.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            collect_files(root, &rel_path, out)?;
        } else {
            out.push(rel_path.to_string_lossy().into_owned());
        }
    }
    Ok(())
}
