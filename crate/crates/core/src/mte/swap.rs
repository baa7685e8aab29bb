/// Swap count `⌈(√(8N − 7) − 1) / 2⌉` that lets tokens from every clip meet
/// every other clip for a window of `n` frames.
pub fn full_mixing_swap_count(n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let root = ((8 * n - 7) as f64).sqrt();
    ((root - 1.0) / 2.0).ceil() as usize
}

/// Ordered token-swap steps; step `i` (1-based) uses offset `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapSchedule {
    pub steps: Vec<usize>,
    pub n_clips: usize,
}

pub fn build_swap_schedule(n_clips: usize, n_swaps: usize) -> SwapSchedule {
    SwapSchedule {
        steps: (1..=n_swaps).collect(),
        n_clips,
    }
}

impl SwapSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Permutation applied at step `step` (0-based position in the schedule):
    /// after the step, clip `k` holds the tokens previously owned by `perm[k]`.
    pub fn permutation(&self, step: usize) -> Vec<usize> {
        step_permutation(self.n_clips, self.steps[step])
    }
}

/// Greedy left-to-right pairing of clip `k` with clip `k − offset` (cyclic);
/// each pair exchanges its tokens. The result is an involution.
pub fn step_permutation(n_clips: usize, offset: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n_clips).collect();
    if n_clips == 0 {
        return perm;
    }
    let mut paired = vec![false; n_clips];
    let shift = offset % n_clips;
    for k in 0..n_clips {
        let partner = (k + n_clips - shift) % n_clips;
        if partner == k || paired[k] || paired[partner] {
            continue;
        }
        paired[k] = true;
        paired[partner] = true;
        perm.swap(k, partner);
    }
    perm
}

/// Applies a permutation to per-clip items.
pub fn permute<T: Clone>(items: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&src| items[src].clone()).collect()
}
