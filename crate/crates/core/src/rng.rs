//! Deterministic generator for trial sampling.
//!
//! Trial sets must be reproducible on any platform and from other languages,
//! so the full algorithm is fixed here:
//!
//! * Stream: SplitMix64. State starts at `seed`; each draw does
//!   `state += 0x9E3779B97F4A7C15`, then
//!   `z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//!   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; return z ^ (z >> 31)`
//!   (all arithmetic wrapping mod 2⁶⁴).
//! * Bounded draw in `[0, n)`: reject raw values `x < (2⁶⁴ mod n)`, return `x mod n`.
//! * Sampling `k` of `n` without replacement: partial Fisher–Yates on the
//!   index list, `for i in 0..k { swap(i, i + below(n - i)) }`, keep the first `k`.
//! * Shuffle: Fisher–Yates from the back, `for i in (1..len).rev() { swap(i, below(i + 1)) }`.

#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    /// `k` distinct elements of `pool`, in draw order.
    pub fn sample<T: Clone>(&mut self, pool: &[T], k: usize) -> Vec<T> {
        assert!(k <= pool.len(), "sample larger than pool");
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        for i in 0..k {
            let j = i + self.below((pool.len() - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx[..k].iter().map(|&i| pool[i].clone()).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
