use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};

/// Deterministic random source keyed by `(seed, stream_id)`.
///
/// Each handle owns a ChaCha8 keystream; distinct stream ids select disjoint
/// keystreams under the same key, so trajectory `i` always sees the same
/// randomness no matter which worker thread runs it.
#[derive(Debug, Clone)]
pub struct RngHandle {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngHandle {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Handle for the `index`-th child of this stream. Children of different
    /// parents do not collide because the parent stream is folded into the key.
    pub fn child(&self, index: u64) -> RngHandle {
        let key = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0x5851_f42d)));
        RngHandle::new(key, index)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Exponential draw with unit mean.
    pub fn exponential(&mut self) -> f64 {
        Exp1.sample(&mut self.inner)
    }

    /// Poisson draw with mean `lambda`; non-positive means give 0.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        if !(lambda > 0.0) {
            return 0;
        }
        // Poisson::new only fails for non-positive or non-finite means.
        Poisson::new(lambda).map(|d| d.sample(&mut self.inner) as u64).unwrap_or(0)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

/// Shorthand used throughout the crate.
pub fn make_rng(seed: u64, stream_id: u64) -> RngHandle {
    RngHandle::new(seed, stream_id)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_sequence() {
        let mut a = make_rng(1, 0);
        let mut b = make_rng(1, 0);
        for _ in 0..1000 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = make_rng(1, 0);
        let mut b = make_rng(1, 1);
        let same = (0..1000).filter(|_| a.uniform() == b.uniform()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn children_are_distinct_and_stable() {
        let p = make_rng(7, 3);
        let mut c0 = p.child(0);
        let mut c0b = p.child(0);
        let mut c1 = p.child(1);
        let mut q0 = make_rng(7, 4).child(0);
        let x = c0.uniform();
        assert_eq!(x, c0b.uniform());
        assert_ne!(x, c1.uniform());
        assert_ne!(x, q0.uniform());
    }

    #[test]
    fn normal_mean_within_clt_bound() {
        let mut r = make_rng(42, 0);
        let n = 1_000_000;
        let mean = (0..n).map(|_| r.normal()).sum::<f64>() / n as f64;
        // 3 sigma of the sample mean is 3e-3.
        assert!(mean.abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn exponential_and_poisson_means() {
        let mut r = make_rng(9, 2);
        let n = 200_000;
        let e = (0..n).map(|_| r.exponential()).sum::<f64>() / n as f64;
        assert!((e - 1.0).abs() < 0.01);
        let p = (0..n).map(|_| r.poisson(3.5) as f64).sum::<f64>() / n as f64;
        assert!((p - 3.5).abs() < 0.02);
        assert_eq!(r.poisson(0.0), 0);
    }
}
