//! Connected components of a thresholded probability frame and their
//! boundary pixels, for vectorizing segmentation output.

/// Default probability threshold.
pub const THRESHOLD: f64 = 0.5;
/// Components smaller than this are dropped.
pub const MIN_AREA: usize = 4;

/// One 4-connected component of above-threshold pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Total pixels in the component.
    pub area: usize,
    /// Pixels with at least one 4-neighbor outside the component (the
    /// image border counts as outside), sorted row-major as (row, col).
    pub boundary: Vec<(usize, usize)>,
}

/// Extract 4-connected components of `{p >= threshold}` from a row-major
/// `height x width` frame, dropping those with area below `min_area`.
/// Components are ordered by their first pixel in row-major order.
pub fn extract_boundaries(
    frame: &[f64],
    height: usize,
    width: usize,
    threshold: f64,
    min_area: usize,
) -> Vec<Component> {
    assert_eq!(frame.len(), height * width, "frame size mismatch");
    let above = |r: usize, c: usize| frame[r * width + c] >= threshold;
    let mut label = vec![usize::MAX; height * width];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..height * width {
        let (sr, sc) = (start / width, start % width);
        if label[start] != usize::MAX || !above(sr, sc) {
            continue;
        }
        // Depth-first fill of one component.
        let id = components.len();
        let mut pixels = Vec::new();
        label[start] = id;
        stack.push((sr, sc));
        while let Some((r, c)) = stack.pop() {
            pixels.push((r, c));
            let mut visit = |nr: usize, nc: usize| {
                let ni = nr * width + nc;
                if label[ni] == usize::MAX && above(nr, nc) {
                    label[ni] = id;
                    stack.push((nr, nc));
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < height {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < width {
                visit(r, c + 1);
            }
        }
        if pixels.len() < min_area {
            continue;
        }
        let boundary: Vec<(usize, usize)> = {
            let mut b: Vec<(usize, usize)> = pixels
                .iter()
                .copied()
                .filter(|&(r, c)| {
                    r == 0
                        || r + 1 == height
                        || c == 0
                        || c + 1 == width
                        || !above(r - 1, c)
                        || !above(r + 1, c)
                        || !above(r, c - 1)
                        || !above(r, c + 1)
                })
                .collect();
            b.sort_unstable();
            b
        };
        components.push(Component {
            area: pixels.len(),
            boundary,
        });
    }
    components
}
