//! Training over a pair of aligned stores: imagery in one, rasterized
//! labels in the other. Each epoch draws a temporal subset, reads only
//! those frames, and takes one SGD step.

use serde::Serialize;

use super::sampler::sample_temporal_subset;
use super::{FactorizedNet, NetConfig, Sample, Tensor, LABEL_IGNORE};
use crate::cube::CubeStore;
use crate::error::{Error, Result};
use crate::grid::Dtype;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Frames per training sequence; the model's T.
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 1e-2,
            seed: 0,
            k: 10,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub subset: Vec<usize>,
}

/// Per-epoch subset seed: decorrelates epochs while keeping the whole run
/// a pure function of the configured seed.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn check_aligned(data: &CubeStore, labels: &CubeStore) -> Result<()> {
    let reason = if data.schema.grid != labels.schema.grid {
        Some("grids differ".to_string())
    } else if data.schema.frames != labels.schema.frames {
        Some("frame lists differ".to_string())
    } else if labels.schema.bands.len() != 1 {
        Some(format!(
            "label store must have exactly one band, found {}",
            labels.schema.bands.len()
        ))
    } else if labels.schema.dtype != Dtype::U8 {
        Some(format!(
            "label store must be u8, found {}",
            labels.schema.dtype.name()
        ))
    } else {
        None
    };
    match reason {
        Some(reason) => Err(Error::MisalignedStores { reason }),
        None => Ok(()),
    }
}

/// Read the chosen frames from a store as a (k, bands, H, W) tensor with
/// values scaled to [0, 1] by the dtype's full range, plus per-pixel
/// validity (false where any band is nodata; those values read as 0).
pub fn read_frames(store: &CubeStore, subset: &[usize]) -> Result<(Tensor, Vec<bool>)> {
    let schema = &store.schema;
    let (h, w) = (schema.grid.height, schema.grid.width);
    let nb = schema.bands.len();
    let scale = match schema.dtype {
        Dtype::U8 => u8::MAX as f64,
        Dtype::U16 => u16::MAX as f64,
        Dtype::F32 => 1.0,
    };
    let mut frames = Tensor::zeros(&[subset.len(), nb, h, w]);
    let mut valid = vec![true; subset.len() * h * w];
    for (ti, &t) in subset.iter().enumerate() {
        let arr = store.read_window(t..t + 1, &schema.bands, 0..h, 0..w)?;
        for b in 0..nb {
            for y in 0..h {
                for x in 0..w {
                    let v = arr.get(0, b, y, x);
                    if arr.is_nodata(v) {
                        valid[(ti * h + y) * w + x] = false;
                    } else {
                        frames.data[((ti * nb + b) * h + y) * w + x] = v / scale;
                    }
                }
            }
        }
    }
    Ok((frames, valid))
}

/// Assemble one training sample from aligned data and label stores.
pub fn assemble_sample(data: &CubeStore, labels: &CubeStore, subset: &[usize]) -> Result<Sample> {
    let (frames, valid) = read_frames(data, subset)?;
    let (h, w) = (data.schema.grid.height, data.schema.grid.width);
    let mut label_t = Tensor::zeros(&[subset.len(), h, w]);
    for (ti, &t) in subset.iter().enumerate() {
        let arr = labels.read_window(t..t + 1, &labels.schema.bands, 0..h, 0..w)?;
        for y in 0..h {
            for x in 0..w {
                label_t.data[(ti * h + y) * w + x] = arr.get(0, 0, y, x);
            }
        }
    }
    Ok(Sample {
        frames,
        labels: label_t,
        valid,
    })
}

/// Fraction of counted pixels (valid, label not ignore) where the
/// thresholded probability agrees with the label.
pub fn accuracy(probs: &Tensor, labels: &Tensor, valid: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut counted = 0usize;
    for i in 0..probs.len() {
        let y = labels.data[i];
        if !valid[i] || y == LABEL_IGNORE {
            continue;
        }
        counted += 1;
        if (probs.data[i] >= 0.5) == (y >= 0.5) {
            hits += 1;
        }
    }
    if counted == 0 {
        return Err(Error::NoCountedPixels);
    }
    Ok(hits as f64 / counted as f64)
}

/// Train a fresh seeded network. Deterministic: the same stores and the
/// same config produce a bitwise-identical model.
pub fn train(
    data: &CubeStore,
    labels: &CubeStore,
    cfg: &TrainConfig,
) -> Result<(FactorizedNet, Vec<EpochLog>)> {
    check_aligned(data, labels)?;
    if cfg.epochs == 0 {
        return Err(Error::Config {
            reason: "epochs must be positive".to_string(),
        });
    }
    if !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(Error::Config {
            reason: format!("learning rate must be positive and finite, got {}", cfg.lr),
        });
    }
    let schema = &data.schema;
    let (h, w) = (schema.grid.height, schema.grid.width);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDims {
            height: h,
            width: w,
        });
    }
    let n = schema.frames.len();
    let config = NetConfig {
        t: cfg.k,
        c_in: schema.bands.len(),
        ..NetConfig::default()
    };
    let mut net = FactorizedNet::init_seeded(config, cfg.seed)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let subset = sample_temporal_subset(n, cfg.k, epoch_seed(cfg.seed, epoch))?;
        let sample = assemble_sample(data, labels, &subset)?;
        let (loss, grads) = net.backward(&sample)?;
        net.sgd_step(&grads, cfg.lr)?;
        log.push(EpochLog {
            epoch,
            loss,
            subset,
        });
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::{CubeSchema, FrameKey};
    use crate::grid::{GridSpec, Samples};
    use chrono::TimeZone;
    use std::path::Path;

    fn frame_keys(n: usize) -> Vec<FrameKey> {
        (0..n)
            .map(|i| FrameKey {
                datetime: chrono::Utc
                    .with_ymd_and_hms(2024, 1, 1 + i as u32, 0, 0, 0)
                    .unwrap(),
                id: format!("frame-{i}"),
            })
            .collect()
    }

    fn grid_8x8() -> GridSpec {
        GridSpec::new(32633, 500_000.0, 6_000_000.0, 10.0, -10.0, 8, 8).unwrap()
    }

    /// Left half bright, right half dark, in two bands with a fixed
    /// per-frame offset; nodata in one corner of frame 0.
    fn write_data_store(path: &Path, n: usize) -> CubeStore {
        let grid = grid_8x8();
        let schema = CubeSchema {
            frames: frame_keys(n),
            bands: vec!["red".to_string(), "nir".to_string()],
            grid,
            dtype: crate::grid::Dtype::U16,
            nodata: 0.0,
            chunk: [2, 2, 8, 8],
        };
        let mut values = Vec::new();
        for t in 0..n {
            for b in 0..2 {
                for y in 0..8 {
                    for x in 0..8 {
                        let v: u16 = if t == 0 && y == 0 && x == 0 {
                            0 // nodata
                        } else if x < 4 {
                            40_000 + (t * 37 + b * 11 + y) as u16
                        } else {
                            10_000 + (t * 37 + b * 11 + y) as u16
                        };
                        values.push(v);
                    }
                }
            }
        }
        CubeStore::write_full(path, &schema, &Samples::U16(values)).unwrap()
    }

    /// Labels: 1 on the left half, 0 on the right, one ignore pixel.
    fn write_label_store(path: &Path, n: usize) -> CubeStore {
        let grid = grid_8x8();
        let schema = CubeSchema {
            frames: frame_keys(n),
            bands: vec!["label".to_string()],
            grid,
            dtype: crate::grid::Dtype::U8,
            nodata: 255.0,
            chunk: [2, 1, 8, 8],
        };
        let mut values = Vec::new();
        for t in 0..n {
            for y in 0..8 {
                for x in 0..8 {
                    let v: u8 = if t == 0 && y == 7 && x == 7 {
                        255
                    } else if x < 4 {
                        1
                    } else {
                        0
                    };
                    values.push(v);
                }
            }
        }
        CubeStore::write_full(path, &schema, &Samples::U8(values)).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_data_store(&dir.path().join("data"), 5);
        let labels = write_label_store(&dir.path().join("labels"), 5);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 1e-2,
            seed: 9,
            k: 3,
        };
        let (net_a, log_a) = train(&data, &labels, &cfg).unwrap();
        let (net_b, log_b) = train(&data, &labels, &cfg).unwrap();
        assert_eq!(net_a.to_bytes(), net_b.to_bytes());
        assert_eq!(
            log_a.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>(),
            log_b.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>()
        );
        let other = TrainConfig { seed: 10, ..cfg };
        let (net_c, _) = train(&data, &labels, &other).unwrap();
        assert_ne!(net_a.to_bytes(), net_c.to_bytes());
    }

    #[test]
    fn losses_are_finite_and_logged_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_data_store(&dir.path().join("data"), 4);
        let labels = write_label_store(&dir.path().join("labels"), 4);
        let cfg = TrainConfig {
            epochs: 5,
            lr: 1e-2,
            seed: 1,
            k: 2,
        };
        let (_, log) = train(&data, &labels, &cfg).unwrap();
        assert_eq!(log.len(), 5);
        for (i, e) in log.iter().enumerate() {
            assert_eq!(e.epoch, i);
            assert!(e.loss.is_finite());
            assert_eq!(e.subset.len(), 2);
        }
    }

    #[test]
    fn overfits_the_tiny_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_data_store(&dir.path().join("data"), 3);
        let labels = write_label_store(&dir.path().join("labels"), 3);
        let cfg = TrainConfig {
            epochs: 500,
            lr: 1e-2,
            seed: 7,
            k: 3,
        };
        let (net, log) = train(&data, &labels, &cfg).unwrap();
        let initial = log.first().unwrap().loss;
        let last = log.last().unwrap().loss;
        assert!(
            last < 0.1 * initial,
            "loss {initial} -> {last}, expected 10x reduction"
        );
        let sample = assemble_sample(&data, &labels, &[0, 1, 2]).unwrap();
        let probs = net.forward(&sample.frames).unwrap();
        let acc = accuracy(&probs, &sample.labels, &sample.valid).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn nodata_pixels_are_excluded() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_data_store(&dir.path().join("data"), 3);
        let (frames, valid) = read_frames(&data, &[0, 1]).unwrap();
        assert!(!valid[0], "frame 0 pixel (0,0) is nodata");
        assert_eq!(frames.data[0], 0.0);
        assert!(valid[8 * 8], "frame 1 pixel (0,0) is data");
        let expected = 40_000.0 + 37.0;
        assert!((frames.data[2 * 8 * 8] - expected / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn misaligned_stores_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_data_store(&dir.path().join("data"), 4);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 1e-2,
            seed: 0,
            k: 2,
        };

        // Fewer frames.
        let labels = write_label_store(&dir.path().join("short"), 3);
        let err = train(&data, &labels, &cfg).unwrap_err();
        assert!(matches!(err, Error::MisalignedStores { reason } if reason.contains("frame")));

        // Wrong dtype.
        let good = write_label_store(&dir.path().join("labels"), 4);
        let mut schema = good.schema.clone();
        schema.dtype = crate::grid::Dtype::U16;
        schema.nodata = 255.0;
        let n = schema.shape().iter().product::<usize>();
        let bad = CubeStore::write_full(
            &dir.path().join("u16-labels"),
            &schema,
            &Samples::U16(vec![0; n]),
        )
        .unwrap();
        let err = train(&data, &bad, &cfg).unwrap_err();
        assert!(matches!(err, Error::MisalignedStores { reason } if reason.contains("u8")));

        // Data used as labels: band count mismatch.
        let err = train(&data, &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::MisalignedStores { reason } if reason.contains("band")));
    }

    #[test]
    fn epoch_seeds_differ_but_epoch_zero_matches_config() {
        assert_eq!(epoch_seed(42, 0), 42);
        let seeds: std::collections::BTreeSet<u64> =
            (0..100).map(|e| epoch_seed(42, e)).collect();
        assert_eq!(seeds.len(), 100);
    }
}
