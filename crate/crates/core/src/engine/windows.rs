//! Causal window indexing: `N` frames spaced `R` apart ending at the target.

/// Frame indices `{t − (n−1)r, …, t − r, t}` with negatives clamped to 0.
pub fn window_indices(t: usize, n: usize, r: usize) -> Vec<usize> {
    (0..n).rev().map(|j| t.saturating_sub(j * r)).collect()
}

/// One window per frame of a procedure with `len` frames.
pub fn make_windows(len: usize, n: usize, r: usize) -> Vec<Vec<usize>> {
    (0..len).map(|t| window_indices(t, n, r)).collect()
}

/// Oldest frame the window of any target can reach back to.
pub fn history_span(n: usize, r: usize) -> usize {
    n.saturating_sub(1) * r
}
