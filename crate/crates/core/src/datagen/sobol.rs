//! Unscrambled Sobol points in Gray-code order with Joe-Kuo direction numbers.

use super::DatagenError;

pub const MAX_DIM: usize = 16;
const BITS: usize = 32;

/// `(s, a, m_1..m_s)` for dimensions 2..=16.
const JOE_KUO: [(u32, u32, &[u32]); MAX_DIM - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
];

/// Left-aligned 32-bit direction numbers for dimension `d` (0-based).
pub(crate) fn direction_numbers(d: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if d == 0 {
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[d - 1];
    let s = s as usize;
    for k in 0..s {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        let mut x = v[k - s] ^ (v[k - s] >> s);
        for j in 1..s {
            if (a >> (s - 1 - j)) & 1 == 1 {
                x ^= v[k - j];
            }
        }
        v[k] = x;
    }
    v
}

/// Incremental Sobol generator. Point `i` is the XOR of direction numbers
/// selected by the bits of `gray(i)`; point 0 is the origin.
#[derive(Debug, Clone)]
pub struct Sobol {
    directions: Vec<[u32; BITS]>,
    state: Vec<u32>,
    index: u64,
}

impl Sobol {
    pub fn new(dim: usize) -> Result<Self, DatagenError> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(DatagenError::UnsupportedDimension(dim));
        }
        Ok(Self { directions: (0..dim).map(direction_numbers).collect(), state: vec![0; dim], index: 0 })
    }

    pub fn dim(&self) -> usize {
        self.state.len()
    }

    /// Index of the point the next call to [`Sobol::next_point`] returns.
    pub fn index(&self) -> u64 {
        self.index
    }

    /// Jumps to point `index` directly.
    pub fn seek(&mut self, index: u64) {
        let gray = index ^ (index >> 1);
        for (d, s) in self.state.iter_mut().enumerate() {
            *s = (0..BITS).filter(|&b| (gray >> b) & 1 == 1).fold(0, |acc, b| acc ^ self.directions[d][b]);
        }
        self.index = index;
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let out = self.state.iter().map(|&s| s as f64 / (1u64 << BITS) as f64).collect();
        let c = self.index.trailing_ones() as usize;
        assert!(c < BITS, "Sobol sequence exhausted");
        for (s, dirs) in self.state.iter_mut().zip(&self.directions) {
            *s ^= dirs[c];
        }
        self.index += 1;
        out
    }
}

/// `count` points starting at index `skip`. The usual call skips 1, dropping
/// the origin.
pub fn sobol_sequence(dim: usize, count: usize, skip: u64) -> Result<Vec<Vec<f64>>, DatagenError> {
    if count == 0 {
        return Err(DatagenError::InvalidArgument("count must be at least 1".into()));
    }
    let mut gen = Sobol::new(dim)?;
    gen.seek(skip);
    Ok((0..count).map(|_| gen.next_point()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct construction: each m_k from the polynomial recurrence on odd
    /// integers, then point i = XOR over bits of gray(i) of m_k / 2^k.
    fn reference_point(dim: usize, i: u64) -> Vec<f64> {
        (0..dim)
            .map(|d| {
                let mut m: Vec<u64> = Vec::new();
                if d == 0 {
                    m = vec![1; BITS];
                } else {
                    let (s, a, init) = JOE_KUO[d - 1];
                    let s = s as usize;
                    m.extend(init.iter().map(|&x| x as u64));
                    for k in s..BITS {
                        let mut x = m[k - s] ^ (m[k - s] << s);
                        for j in 1..s {
                            let aj = (a >> (s - 1 - j)) & 1;
                            x ^= (aj as u64) * (m[k - j] << j);
                        }
                        m.push(x);
                    }
                }
                let gray = i ^ (i >> 1);
                let mut bits: u64 = 0;
                for (k, &mk) in m.iter().enumerate() {
                    if (gray >> k) & 1 == 1 {
                        bits ^= mk << (BITS - 1 - k);
                    }
                }
                bits as f64 / 2f64.powi(BITS as i32)
            })
            .collect()
    }

    #[test]
    fn first_dimension_prefix() {
        let pts = sobol_sequence(1, 5, 1).unwrap();
        let flat: Vec<f64> = pts.into_iter().map(|p| p[0]).collect();
        assert_eq!(flat, vec![0.5, 0.75, 0.25, 0.375, 0.875]);
    }

    #[test]
    fn matches_direct_construction() {
        let pts = sobol_sequence(MAX_DIM, 3000, 0).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(p, &reference_point(MAX_DIM, i as u64), "point {i}");
        }
    }

    #[test]
    fn known_points() {
        // Integer numerators over 2^32 for points 100 and 4095.
        let expect: [(u64, [u32; 16]); 2] = [
            (
                100,
                [
                    1778384896, 1107296256, 3321888768, 3120562176, 3791650816, 3187671040, 100663296, 2046820352,
                    2717908992, 2986344448, 1979711488, 2919235584, 2046820352, 3657433088, 1375731712, 2113929216,
                ],
            ),
            (
                4095,
                [
                    1048576, 4042260480, 1435500544, 3872391168, 4038066176, 338690048, 4077912064, 1678770176,
                    823132160, 1058013184, 2446327808, 1380974592, 1584398336, 2232418304, 2366636032, 1789919232,
                ],
            ),
        ];
        for (i, nums) in expect {
            let p = &sobol_sequence(16, 1, i).unwrap()[0];
            for (x, n) in p.iter().zip(nums) {
                assert_eq!(*x, n as f64 / 4294967296.0, "point {i}");
            }
        }
    }

    #[test]
    fn seek_agrees_with_stepping() {
        let mut a = Sobol::new(7).unwrap();
        for _ in 0..777 {
            a.next_point();
        }
        let mut b = Sobol::new(7).unwrap();
        b.seek(777);
        assert_eq!(a.next_point(), b.next_point());
    }

    #[test]
    fn range_and_errors() {
        for p in sobol_sequence(5, 2000, 1).unwrap() {
            assert!(p.iter().all(|&x| (0.0..1.0).contains(&x)));
        }
        assert!(matches!(sobol_sequence(0, 1, 1), Err(DatagenError::UnsupportedDimension(0))));
        assert!(matches!(sobol_sequence(17, 1, 1), Err(DatagenError::UnsupportedDimension(17))));
    }

    #[test]
    fn half_intervals_balanced() {
        let pts = sobol_sequence(5, 5000, 1).unwrap();
        for d in 0..5 {
            let lower = pts.iter().filter(|p| p[d] < 0.5).count() as i64;
            assert!((lower - 2500).abs() <= 2, "dim {d}: {lower}");
        }
    }

    /// Largest gap between the empirical and uniform measure over anchored
    /// boxes with corners on a 64 x 64 grid.
    fn grid_star_discrepancy(pts: &[[f64; 2]]) -> f64 {
        let n = pts.len() as f64;
        let mut worst = 0.0f64;
        for gx in 1..=64 {
            for gy in 1..=64 {
                let (x, y) = (gx as f64 / 64.0, gy as f64 / 64.0);
                let inside = pts.iter().filter(|p| p[0] < x && p[1] < y).count() as f64;
                worst = worst.max((inside / n - x * y).abs());
            }
        }
        worst
    }

    #[test]
    fn lower_discrepancy_than_pseudo_random() {
        let sobol: Vec<[f64; 2]> = sobol_sequence(2, 1024, 1).unwrap().iter().map(|p| [p[0], p[1]]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1024);
        let random: Vec<[f64; 2]> = (0..1024).map(|_| [rng.random(), rng.random()]).collect();
        let (ds, dr) = (grid_star_discrepancy(&sobol), grid_star_discrepancy(&random));
        assert!(ds < dr, "sobol {ds} random {dr}");
    }
}
