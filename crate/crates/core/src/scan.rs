//! Linear-recurrence scans `h_t = a_t·h_{t−1} + b_t` with `h_0 = 0`.
//!
//! Arrays are laid out lane-major: `lanes` independent recurrences of length
//! `len` each (for the selective scan a lane is one channel×state pair).
//! [`scan_parallel`] is a Blelloch up-sweep/down-sweep over
//! [`AffineScanElement`]s: `O(L)` work and `O(log L)` depth per lane.

use num_traits::Float;
use rayon::prelude::*;

/// The affine map `h ↦ a·h + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineScanElement<T> {
    pub a: T,
    pub b: T,
}

impl<T: Float> AffineScanElement<T> {
    pub fn identity() -> Self {
        AffineScanElement {
            a: T::one(),
            b: T::zero(),
        }
    }

    /// `self` applied first, then `next`: `(next.a·a, next.a·b + next.b)`.
    #[inline]
    pub fn then(self, next: Self) -> Self {
        AffineScanElement {
            a: next.a * self.a,
            b: next.a * self.b + next.b,
        }
    }

    pub fn apply(self, h: T) -> T {
        self.a * h + self.b
    }
}

pub fn scan_sequential<T: Float>(a: &[T], b: &[T], len: usize) -> Vec<T> {
    assert_eq!(a.len(), b.len(), "scan: a and b lengths differ");
    if len == 0 {
        return Vec::new();
    }
    assert_eq!(a.len() % len, 0, "scan: length does not divide the buffer");
    let mut h = vec![T::zero(); a.len()];
    for ((hl, al), bl) in h.chunks_mut(len).zip(a.chunks(len)).zip(b.chunks(len)) {
        let mut acc = T::zero();
        for t in 0..len {
            acc = al[t] * acc + bl[t];
            hl[t] = acc;
        }
    }
    h
}

/// Blelloch scan of one lane, in place on `buf` (length a power of two).
fn blelloch_lane<T: Float>(buf: &mut [AffineScanElement<T>]) {
    let n = buf.len();
    let mut step = 1;
    while step < n {
        let mut i = 2 * step - 1;
        while i < n {
            buf[i] = buf[i - step].then(buf[i]);
            i += 2 * step;
        }
        step *= 2;
    }
    buf[n - 1] = AffineScanElement::identity();
    step = n / 2;
    while step >= 1 {
        let mut i = 2 * step - 1;
        while i < n {
            let left = buf[i - step];
            buf[i - step] = buf[i];
            buf[i] = buf[i].then(left);
            i += 2 * step;
        }
        step /= 2;
    }
}

pub fn scan_parallel<T: Float + Send + Sync>(a: &[T], b: &[T], len: usize) -> Vec<T> {
    assert_eq!(a.len(), b.len(), "scan: a and b lengths differ");
    if len == 0 {
        return Vec::new();
    }
    assert_eq!(a.len() % len, 0, "scan: length does not divide the buffer");
    let padded = len.next_power_of_two();
    let mut h = vec![T::zero(); a.len()];
    h.par_chunks_mut(len)
        .zip(a.par_chunks(len).zip(b.par_chunks(len)))
        .for_each(|(hl, (al, bl))| {
            let mut buf: Vec<AffineScanElement<T>> = al
                .iter()
                .zip(bl)
                .map(|(&a, &b)| AffineScanElement { a, b })
                .chain(std::iter::repeat(AffineScanElement::identity()))
                .take(padded)
                .collect();
            blelloch_lane(&mut buf);
            // Exclusive prefix composed with the element itself.
            for t in 0..len {
                hl[t] = buf[t].then(AffineScanElement { a: al[t], b: bl[t] }).b;
            }
        });
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanImpl {
    #[default]
    Sequential,
    Parallel,
}

pub fn scan<T: Float + Send + Sync>(imp: ScanImpl, a: &[T], b: &[T], len: usize) -> Vec<T> {
    match imp {
        ScanImpl::Sequential => scan_sequential(a, b, len),
        ScanImpl::Parallel => scan_parallel(a, b, len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_recurrence() {
        let h = scan_sequential(&[0.5, 0.5], &[1.0, 2.0], 2);
        assert_eq!(h, vec![1.0, 2.5]);
        assert_eq!(scan_parallel(&[0.5, 0.5], &[1.0, 2.0], 2), vec![1.0, 2.5]);
    }

    #[test]
    fn unit_gain_is_prefix_sum_and_zero_offset_is_zero() {
        let b = [1.0, -2.0, 3.5, 0.25, 4.0];
        let h = scan_parallel(&[1.0; 5], &b, 5);
        let mut acc = 0.0;
        for (t, v) in h.iter().enumerate() {
            acc += b[t];
            assert_eq!(*v, acc);
        }
        assert!(scan_parallel(&[0.3; 7], &[0.0; 7], 7).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_returns_offset() {
        assert_eq!(scan_parallel(&[0.9f32], &[-0.4], 1), vec![-0.4]);
    }

    #[test]
    fn multiple_lanes_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..3 * 13).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..3 * 13).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seq = scan_sequential(&a, &b, 13);
        let par = scan_parallel(&a, &b, 13);
        for lane in 0..3 {
            let one = scan_sequential(&a[lane * 13..(lane + 1) * 13], &b[lane * 13..(lane + 1) * 13], 13);
            assert_eq!(&seq[lane * 13..(lane + 1) * 13], &one[..]);
        }
        for (x, y) in seq.iter().zip(&par) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn composition_is_associative(v in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let e = |i: usize| AffineScanElement { a: v[2 * i], b: v[2 * i + 1] };
            let left = e(0).then(e(1)).then(e(2));
            let right = e(0).then(e(1).then(e(2)));
            prop_assert!((left.a - right.a).abs() < 1e-12);
            prop_assert!((left.b - right.b).abs() < 1e-12);
            // Composition agrees with applying the maps in sequence.
            let h = 0.37;
            prop_assert!((left.apply(h) - e(2).apply(e(1).apply(e(0).apply(h)))).abs() < 1e-12);
        }

        #[test]
        fn stays_within_geometric_bound(len in 1usize..300, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..0.95)).collect();
            let b: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let amax = a.iter().cloned().fold(0.0, f64::max);
            let bmax = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let bound = bmax / (1.0 - amax) + 1e-12;
            for h in scan_parallel(&a, &b, len) {
                prop_assert!(h.abs() <= bound);
            }
        }
    }
}
