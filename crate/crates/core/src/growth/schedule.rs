//! Batch sizes for statistics estimation and for training between growth
//! events.

/// Unclamped estimation batch size
/// `ceil(coeff (S W)^2 / P * 2^k)` with `k = sqrt(1024 / P)` for conv layers.
///
/// `kernel` is the number of kernel taps `S` (`k^2`, 1 for dense), `width` the current number
/// of neurons `W`, `pixels` the spatial size `P` of the layer output (1 for
/// dense).
pub fn estimation_batch_size_raw(coeff: f64, kernel: usize, width: usize, pixels: usize, conv: bool) -> usize {
    let p = pixels.max(1) as f64;
    let sw = (kernel * width) as f64;
    let mut n = coeff * sw * sw / p;
    if conv {
        n *= 2f64.powf((1024.0 / p).sqrt());
    }
    n.ceil().max(0.0) as usize
}

/// `estimation_batch_size_raw` clamped to `[8, dataset]` (or `dataset` when
/// the dataset is smaller than 8).
pub fn estimation_batch_size(coeff: f64, kernel: usize, width: usize, pixels: usize, conv: bool, dataset: usize) -> usize {
    estimation_batch_size_raw(coeff, kernel, width, pixels, conv).clamp(8.min(dataset), dataset)
}

/// Learning batch size `round(b sqrt(c_now / c_prev))`, at least 1.
pub fn learning_batch_size(prev: usize, complexity_prev: f64, complexity_now: f64) -> usize {
    if complexity_prev <= 0.0 {
        return prev.max(1);
    }
    ((prev as f64) * (complexity_now / complexity_prev).sqrt()).round().max(1.0) as usize
}

/// When and where growth events happen.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthSchedule {
    /// Training epochs between growth events.
    pub epochs_between: usize,
    pub max_additions: usize,
    /// Stop growing a layer once it reaches this width.
    pub target_widths: Vec<usize>,
    pub initial_batch: usize,
    pub estimation_coeff: f64,
}

impl Default for GrowthSchedule {
    fn default() -> Self {
        GrowthSchedule { epochs_between: 1, max_additions: 10, target_widths: Vec::new(), initial_batch: 32, estimation_coeff: 1.0 }
    }
}

impl GrowthSchedule {
    /// Growable layers in round-robin order, skipping ones at target width.
    pub fn next_site(&self, positions: &[usize], widths: &[usize], event: usize) -> Option<usize> {
        let m = positions.len();
        (0..m).map(|j| (event + j) % m).find(|&j| self.target_widths.get(j).is_none_or(|&t| widths[j] < t)).map(|j| positions[j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn learning_batch_examples() {
        assert_eq!(learning_batch_size(32, 1000.0, 4000.0), 64);
        assert_eq!(learning_batch_size(32, 1000.0, 1000.0), 32);
        assert_eq!(learning_batch_size(32, 1.0, 2.0), 45);
        assert_eq!(learning_batch_size(1, 1000.0, 1.0), 1);
    }

    #[test]
    fn estimation_examples() {
        assert_eq!(estimation_batch_size_raw(1.0, 1, 10, 100, false), 1);
        assert_eq!(estimation_batch_size(1.0, 1, 10, 100, false, 1000), 8);
        assert_eq!(estimation_batch_size_raw(1.0, 8, 16, 1024, true), 32);
        assert_eq!(estimation_batch_size_raw(1.0, 1, 64, 1, false), 4096);
        assert_eq!(estimation_batch_size_raw(1.0, 9, 16, 1024, true), 41);
        assert_eq!(estimation_batch_size(0.0, 9, 16, 1024, true, 1000), 8);
        assert_eq!(estimation_batch_size(1e6, 8, 16, 1024, true, 500), 500);
        assert_eq!(estimation_batch_size(1.0, 1, 1, 1, false, 5), 5);
    }

    #[test]
    fn round_robin_skips_full_layers() {
        let s = GrowthSchedule { target_widths: vec![2, 5], ..Default::default() };
        assert_eq!(s.next_site(&[0, 2], &[1, 1], 0), Some(0));
        assert_eq!(s.next_site(&[0, 2], &[1, 1], 1), Some(2));
        assert_eq!(s.next_site(&[0, 2], &[2, 1], 0), Some(2));
        assert_eq!(s.next_site(&[0, 2], &[2, 5], 0), None);
    }

    proptest! {
        #[test]
        fn estimation_monotone_in_width(w in 1usize..200, p in 1usize..5000, conv: bool) {
            let a = estimation_batch_size_raw(2.0, 3, w, p, conv);
            let b = estimation_batch_size_raw(2.0, 3, w + 1, p, conv);
            prop_assert!(b >= a);
            let c = estimation_batch_size(2.0, 3, w, p, conv, 10_000);
            prop_assert!((8..=10_000).contains(&c));
        }

        #[test]
        fn learning_batch_positive(b in 1usize..1000, c0 in 1.0f64..1e6, c1 in 0.0f64..1e6) {
            prop_assert!(learning_batch_size(b, c0, c1) >= 1);
        }
    }
}
