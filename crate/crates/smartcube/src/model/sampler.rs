//! Temporal subset sampling for training: both endpoints always included,
//! interior picks spread across three contiguous spans so every draw
//! covers the beginning, middle, and end of the sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Draw `k` of `n` frame indices, strictly increasing, deterministic in
/// `seed`. Indices 0 and n-1 are always present. The interior n-2 indices
/// split into three contiguous spans of sizes `base + (i < rem)` where
/// `base = (n-2) / 3`, `rem = (n-2) % 3`; the k-2 interior picks are
/// assigned round-robin beginning -> middle -> end (skipping spans that
/// are already fully used) and sampled uniformly without replacement
/// within each span.
pub fn sample_temporal_subset(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config {
            reason: format!("subset size must be at least 2, got {k}"),
        });
    }
    if k > n {
        return Err(Error::SubsetTooLarge { n, k });
    }
    if k == n {
        return Ok((0..n).collect());
    }

    let interior = n - 2;
    let base = interior / 3;
    let rem = interior % 3;
    let sizes = [base + usize::from(rem > 0), base + usize::from(rem > 1), base];
    let starts = [1, 1 + sizes[0], 1 + sizes[0] + sizes[1]];

    let mut quota = [0usize; 3];
    let mut remaining = k - 2;
    let mut s = 0;
    while remaining > 0 {
        if quota[s] < sizes[s] {
            quota[s] += 1;
            remaining -= 1;
        }
        s = (s + 1) % 3;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = vec![0usize, n - 1];
    for s in 0..3 {
        if quota[s] == 0 {
            continue;
        }
        let chosen = rand::seq::index::sample(&mut rng, sizes[s], quota[s]);
        picks.extend(chosen.iter().map(|off| starts[s] + off));
    }
    picks.sort_unstable();
    Ok(picks)
}
