use super::{Shape, Tensor};

/// SplitMix64 used as a counter-based generator: element `i` of stream `seed`
/// is `mix(seed + (i + 1) * 0x9E3779B97F4A7C15)` with the standard SplitMix64
/// finaliser. Values depend only on `(seed, i)`, never on platform or call
/// history.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    seed: u64,
    counter: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Output at an arbitrary counter position.
    pub fn at(seed: u64, index: u64) -> u64 {
        let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = Self::at(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform integer in `[0, bound)` (multiply-shift, bias below 2^-32).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Derives an independent stream seed for a named parameter.
    pub fn derive(seed: u64, name: &str) -> u64 {
        // FNV-1a over the name, then mixed with the parent seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        Self::at(seed ^ h, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in = c * h * w`.
    UniformFanIn,
    Zeros,
    Ones,
}

pub fn seeded_init(shape: Shape, scheme: InitScheme, seed: u64) -> Tensor {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::Ones => Tensor::full(shape, 1.0),
        InitScheme::UniformFanIn => {
            let fan_in = (shape.c * shape.h * shape.w).max(1);
            let bound = 1.0 / (fan_in as f32).sqrt();
            let mut rng = SplitMix64::new(seed);
            let data = (0..shape.numel())
                .map(|_| (2.0 * rng.next_f32() - 1.0) * bound)
                .collect();
            Tensor::new(shape, data).expect("length matches shape")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_stream() {
        // Reference values of SplitMix64 seeded with 0 (Vigna's splitmix64.c).
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn zeros_and_ones() {
        let s = Shape::new(2, 3, 4, 5);
        assert!(seeded_init(s, InitScheme::Zeros, 1).data().iter().all(|&v| v == 0.0));
        assert!(seeded_init(s, InitScheme::Ones, 1).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn same_seed_bit_identical() {
        let s = Shape::new(4, 3, 5, 5);
        let a = seeded_init(s, InitScheme::UniformFanIn, 77);
        let b = seeded_init(s, InitScheme::UniformFanIn, 77);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn different_seeds_differ_almost_everywhere() {
        let s = Shape::new(1, 8, 32, 32);
        let a = seeded_init(s, InitScheme::UniformFanIn, 1);
        let b = seeded_init(s, InitScheme::UniformFanIn, 2);
        let differing = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        assert!(differing * 100 >= 99 * s.numel(), "{differing}/{}", s.numel());
    }

    #[test]
    fn fan_in_bound() {
        let s = Shape::new(16, 4, 3, 3);
        let bound = 1.0 / 36f32.sqrt();
        let t = seeded_init(s, InitScheme::UniformFanIn, 5);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }
}
