//! Run configuration: a flat `key = value` text format plus programmatic
//! overrides, so every run is reproducible from its config alone.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};

use crate::cube::{DEFAULT_MAX_CLOUD, DEFAULT_MIN_VALID};
use crate::error::{Error, Result};
use crate::grid::{BBox, Dtype, Resampling};

/// Everything a pipeline run needs. Fields without a natural default are
/// optional and validated by the command that requires them.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Catalog root document (path or URL).
    pub catalog: Option<String>,
    /// Query extent, EPSG:4326 degrees.
    pub bbox: Option<BBox>,
    pub start: Option<DateTime<Utc>>,
    pub end: Option<DateTime<Utc>>,
    pub bands: Vec<String>,
    pub collections: Vec<String>,
    /// Target resolution in projected meters.
    pub resolution: Option<f64>,
    /// Chunk dims (ct, cb, cy, cx).
    pub chunk: [usize; 4],
    pub workers: usize,
    pub max_cloud: f64,
    pub min_valid: f64,
    pub seed: u64,
    /// Build or inference output directory.
    pub out: Option<PathBuf>,
    /// Existing store to read (info, train, infer).
    pub store: Option<PathBuf>,
    /// Label store for training.
    pub labels: Option<PathBuf>,
    /// Model artifact path.
    pub model: Option<PathBuf>,
    pub epochs: usize,
    pub lr: f64,
    /// Temporal subset size (the model's T).
    pub k: usize,
    pub resample: Resampling,
    pub dtype: Dtype,
    pub nodata: f64,
    /// Write PGM previews next to inference output.
    pub previews: bool,
    /// Boundary extraction parameters for previews.
    pub threshold: f64,
    pub min_area: usize,
    pub verbose: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            catalog: None,
            bbox: None,
            start: None,
            end: None,
            bands: Vec::new(),
            collections: Vec::new(),
            resolution: None,
            chunk: [4, 1, 256, 256],
            workers: 4,
            max_cloud: DEFAULT_MAX_CLOUD,
            min_valid: DEFAULT_MIN_VALID,
            seed: 0,
            out: None,
            store: None,
            labels: None,
            model: None,
            epochs: 100,
            lr: 1e-2,
            k: 10,
            resample: Resampling::Nearest,
            dtype: Dtype::U16,
            nodata: 0.0,
            previews: false,
            threshold: crate::model::boundary::THRESHOLD,
            min_area: crate::model::boundary::MIN_AREA,
            verbose: false,
        }
    }
}

fn bad<T>(key: &str, value: &str, hint: &str) -> Result<T> {
    Err(Error::Config {
        reason: format!("bad value {value:?} for {key}: {hint}"),
    })
}

pub fn parse_bbox(value: &str) -> Result<BBox> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return bad("bbox", value, "expected minx,miny,maxx,maxy");
    }
    let mut nums = [0.0; 4];
    for (slot, part) in nums.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| Error::Config {
                reason: format!("bad value {value:?} for bbox: {part:?} is not a number"),
            })?;
    }
    BBox::new(nums[0], nums[1], nums[2], nums[3]).map_err(|e| Error::Config {
        reason: format!("bad value {value:?} for bbox: {e}"),
    })
}

pub fn parse_chunk(value: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return bad("chunk", value, "expected ct,cb,cy,cx");
    }
    let mut dims = [0usize; 4];
    for (slot, part) in dims.iter_mut().zip(&parts) {
        *slot = match part.parse() {
            Ok(v) if v > 0 => v,
            _ => return bad("chunk", value, "dims must be positive integers"),
        };
    }
    Ok(dims)
}

pub fn parse_datetime(key: &str, value: &str) -> Result<DateTime<Utc>> {
    match DateTime::parse_from_rfc3339(value) {
        Ok(dt) => Ok(dt.with_timezone(&Utc)),
        Err(e) => bad(key, value, &format!("not RFC 3339 ({e})")),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl RunConfig {
    /// Apply one `key = value` assignment. Shared by the file parser and
    /// the flag layer so both accept the same keys and spellings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "catalog" => self.catalog = Some(value.to_string()),
            "bbox" => self.bbox = Some(parse_bbox(value)?),
            "start" => self.start = Some(parse_datetime(key, value)?),
            "end" => self.end = Some(parse_datetime(key, value)?),
            "bands" => self.bands = parse_list(value),
            "collections" => self.collections = parse_list(value),
            "resolution" => match value.parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => self.resolution = Some(v),
                _ => return bad(key, value, "expected a positive number"),
            },
            "chunk" => self.chunk = parse_chunk(value)?,
            "workers" => match value.parse::<usize>() {
                Ok(v) if v > 0 => self.workers = v,
                _ => return bad(key, value, "expected a positive integer"),
            },
            "max_cloud" => match value.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => self.max_cloud = v,
                _ => return bad(key, value, "expected a fraction in [0, 1]"),
            },
            "min_valid" => match value.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => self.min_valid = v,
                _ => return bad(key, value, "expected a fraction in [0, 1]"),
            },
            "seed" => match value.parse::<u64>() {
                Ok(v) => self.seed = v,
                _ => return bad(key, value, "expected an unsigned integer"),
            },
            "out" => self.out = Some(PathBuf::from(value)),
            "store" => self.store = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "model" => self.model = Some(PathBuf::from(value)),
            "epochs" => match value.parse::<usize>() {
                Ok(v) if v > 0 => self.epochs = v,
                _ => return bad(key, value, "expected a positive integer"),
            },
            "lr" => match value.parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => self.lr = v,
                _ => return bad(key, value, "expected a positive number"),
            },
            "k" => match value.parse::<usize>() {
                Ok(v) if v >= 2 => self.k = v,
                _ => return bad(key, value, "expected an integer >= 2"),
            },
            "resample" => {
                self.resample = match value {
                    "nearest" => Resampling::Nearest,
                    "bilinear" => Resampling::Bilinear,
                    _ => return bad(key, value, "expected nearest or bilinear"),
                }
            }
            "dtype" => self.dtype = Dtype::parse(value)?,
            "nodata" => match value.parse::<f64>() {
                Ok(v) => self.nodata = v,
                _ => return bad(key, value, "expected a number"),
            },
            "previews" => match value.parse::<bool>() {
                Ok(v) => self.previews = v,
                _ => return bad(key, value, "expected true or false"),
            },
            "threshold" => match value.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => self.threshold = v,
                _ => return bad(key, value, "expected a fraction in [0, 1]"),
            },
            "min_area" => match value.parse::<usize>() {
                Ok(v) => self.min_area = v,
                _ => return bad(key, value, "expected an unsigned integer"),
            },
            "verbose" => match value.parse::<bool>() {
                Ok(v) => self.verbose = v,
                _ => return bad(key, value, "expected true or false"),
            },
            _ => {
                return Err(Error::Config {
                    reason: format!("unknown config key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Parse flat `key = value` text; `#` starts a comment, blank lines
    /// are ignored.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    reason: format!("line {}: expected key = value, got {raw:?}", lineno + 1),
                });
            };
            self.set(key.trim(), value.trim()).map_err(|e| Error::Config {
                reason: format!("line {}: {e}", lineno + 1),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            reason: format!("cannot read config {}: {e}", path.display()),
        })?;
        RunConfig::parse(&text)
    }

    /// Render back to the file format; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        if let Some(v) = &self.catalog {
            kv("catalog", v.clone());
        }
        if let Some(b) = &self.bbox {
            kv("bbox", format!("{},{},{},{}", b.minx, b.miny, b.maxx, b.maxy));
        }
        if let Some(v) = &self.start {
            kv("start", v.to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
        }
        if let Some(v) = &self.end {
            kv("end", v.to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
        }
        if !self.bands.is_empty() {
            kv("bands", self.bands.join(","));
        }
        if !self.collections.is_empty() {
            kv("collections", self.collections.join(","));
        }
        if let Some(v) = self.resolution {
            kv("resolution", v.to_string());
        }
        kv(
            "chunk",
            format!(
                "{},{},{},{}",
                self.chunk[0], self.chunk[1], self.chunk[2], self.chunk[3]
            ),
        );
        kv("workers", self.workers.to_string());
        kv("max_cloud", self.max_cloud.to_string());
        kv("min_valid", self.min_valid.to_string());
        kv("seed", self.seed.to_string());
        if let Some(v) = &self.out {
            kv("out", v.display().to_string());
        }
        if let Some(v) = &self.store {
            kv("store", v.display().to_string());
        }
        if let Some(v) = &self.labels {
            kv("labels", v.display().to_string());
        }
        if let Some(v) = &self.model {
            kv("model", v.display().to_string());
        }
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("k", self.k.to_string());
        kv(
            "resample",
            match self.resample {
                Resampling::Nearest => "nearest".to_string(),
                Resampling::Bilinear => "bilinear".to_string(),
            },
        );
        kv("dtype", self.dtype.name().to_string());
        kv("nodata", self.nodata.to_string());
        kv("previews", self.previews.to_string());
        kv("threshold", self.threshold.to_string());
        kv("min_area", self.min_area.to_string());
        kv("verbose", self.verbose.to_string());
        out
    }

    /// A required field, or a usage error naming the flag.
    pub fn require<'a, T>(field: &'a Option<T>, flag: &str) -> Result<&'a T> {
        field.as_ref().ok_or_else(|| Error::Config {
            reason: format!("missing required --{flag} (or config key {})", flag.replace('-', "_")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_module_constants() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.workers, 4);
        assert_eq!(cfg.max_cloud, 0.5);
        assert_eq!(cfg.min_valid, 0.25);
        assert_eq!(cfg.k, 10);
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.lr, 1e-2);
    }

    #[test]
    fn parses_comments_blanks_and_values() {
        let text = "\
# a full run
catalog = /data/catalog.json   # trailing comment
bbox = 10.0, 59.0, 10.5, 59.5
start = 2024-01-01T00:00:00Z
end = 2024-03-01T00:00:00Z

bands = red,nir
resolution = 10
chunk = 2,1,8,8
workers = 8
max_cloud = 0.3
seed = 42
out = /tmp/cube
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.catalog.as_deref(), Some("/data/catalog.json"));
        let b = cfg.bbox.unwrap();
        assert_eq!((b.minx, b.miny, b.maxx, b.maxy), (10.0, 59.0, 10.5, 59.5));
        assert_eq!(cfg.bands, vec!["red", "nir"]);
        assert_eq!(cfg.resolution, Some(10.0));
        assert_eq!(cfg.chunk, [2, 1, 8, 8]);
        assert_eq!(cfg.workers, 8);
        assert_eq!(cfg.max_cloud, 0.3);
        assert_eq!(cfg.min_valid, 0.25, "untouched default");
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.out, Some(PathBuf::from("/tmp/cube")));
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.set("catalog", "http://example/catalog.json").unwrap();
        cfg.set("bbox", "1,2,3,4").unwrap();
        cfg.set("start", "2024-06-01T12:30:00Z").unwrap();
        cfg.set("bands", "red,nir,swir").unwrap();
        cfg.set("resolution", "20").unwrap();
        cfg.set("out", "/tmp/x").unwrap();
        cfg.set("resample", "bilinear").unwrap();
        cfg.set("dtype", "f32").unwrap();
        cfg.set("previews", "true").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            RunConfig::parse("wat = 1"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            RunConfig::parse("workers = 0"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            RunConfig::parse("bbox = 1,2,3"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            RunConfig::parse("max_cloud = 1.5"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            RunConfig::parse("start = yesterday"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            RunConfig::parse("just a line"),
            Err(Error::Config { .. })
        ));
        let err = RunConfig::parse("seed = -1").unwrap_err();
        assert!(err.is_usage(), "config errors are usage errors: {err}");
    }

    #[test]
    fn later_assignments_override_earlier_ones() {
        let cfg = RunConfig::parse("workers = 2\nworkers = 6\n").unwrap();
        assert_eq!(cfg.workers, 6);
    }
}
