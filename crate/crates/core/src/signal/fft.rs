//! Discrete Fourier transforms.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley-Tukey kernel. Other
//! lengths go through Bluestein's chirp-z identity, which reduces an
//! arbitrary-length DFT to a circular convolution evaluated with radix-2
//! transforms of the next power of two at least `2n - 1`. The same machinery
//! evaluates the DTFT on an arbitrary uniform frequency grid ([`ZoomDft`]),
//! which is how spectra are resampled onto a ppm window.

use std::f64::consts::PI;

use num_complex::Complex64;

/// Precomputed twiddles and bit-reversal table for one power-of-two length.
#[derive(Debug, Clone)]
pub struct Radix2 {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<u32>,
}

impl Radix2 {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "radix-2 length must be a power of two");
        let twiddles = (0..n / 2)
            .map(|k| {
                let theta = -2.0 * PI * k as f64 / n as f64;
                Complex64::new(theta.cos(), theta.sin())
            })
            .collect();
        let bits = n.trailing_zeros();
        let bitrev = (0..n as u32)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (32 - bits) })
            .collect();
        Self { n, twiddles, bitrev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform, `X_k = sum_n x_n exp(-2 pi i k n / N)`.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    /// In-place unnormalised inverse transform (no `1/N` factor).
    pub fn inverse_unnormalized(&self, data: &mut [Complex64]) {
        self.run(data, true);
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.n);
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i] as usize;
            if i < j {
                data.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * stride];
                    if inverse {
                        w = w.conj();
                    }
                    let a = data[start + k];
                    let b = data[start + k + half] * w;
                    data[start + k] = a + b;
                    data[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

/// Chirp-z evaluation of `X_k = sum_{n<N} x_n exp(-2 pi i (f0 + k df) n)` for
/// `k < M`, with frequencies in cycles per sample.
#[derive(Debug, Clone)]
pub struct ZoomDft {
    n: usize,
    m: usize,
    pre: Vec<Complex64>,
    post: Vec<Complex64>,
    kernel: Vec<Complex64>,
    plan: Radix2,
}

/// `exp(-i pi df j^2)` with the phase reduced before the trig call so large
/// indices keep full precision.
fn chirp(df: f64, j: usize) -> Complex64 {
    // f64 is exact for j^2 up to 2^53.
    let j2 = (j as f64) * (j as f64);
    let cycles = (0.5 * df * j2).rem_euclid(1.0);
    let theta = -2.0 * PI * cycles;
    Complex64::new(theta.cos(), theta.sin())
}

impl ZoomDft {
    pub fn new(n: usize, m: usize, f0: f64, df: f64) -> Self {
        assert!(n > 0 && m > 0);
        let l = (n + m - 1).next_power_of_two();
        let plan = Radix2::new(l);
        let pre = (0..n)
            .map(|j| {
                let theta = -2.0 * PI * (f0 * j as f64).rem_euclid(1.0);
                Complex64::new(theta.cos(), theta.sin()) * chirp(df, j)
            })
            .collect();
        let post = (0..m).map(|k| chirp(df, k)).collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); l];
        for (j, slot) in kernel.iter_mut().enumerate().take(m) {
            *slot = chirp(df, j).conj();
        }
        for j in 1..n {
            kernel[l - j] = chirp(df, j).conj();
        }
        plan.forward(&mut kernel);
        Self { n, m, pre, post, kernel, plan }
    }

    pub fn input_len(&self) -> usize {
        self.n
    }

    pub fn output_len(&self) -> usize {
        self.m
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.n, "zoom DFT input length");
        let l = self.plan.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); l];
        for ((b, &xi), &p) in buf.iter_mut().zip(x).zip(&self.pre) {
            *b = xi * p;
        }
        self.plan.forward(&mut buf);
        for (b, &k) in buf.iter_mut().zip(&self.kernel) {
            *b *= k;
        }
        self.plan.inverse_unnormalized(&mut buf);
        let scale = 1.0 / l as f64;
        buf.truncate(self.m);
        for (b, &p) in buf.iter_mut().zip(&self.post) {
            *b = *b * p * scale;
        }
        buf
    }
}

/// Forward DFT of any length.
pub fn fft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    if n.is_power_of_two() {
        let mut out = x.to_vec();
        Radix2::new(n).forward(&mut out);
        out
    } else {
        ZoomDft::new(n, n, 0.0, 1.0 / n as f64).apply(x)
    }
}

/// Inverse DFT of any length, normalised so `ifft(fft(x)) == x`.
pub fn ifft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    // conj(FFT(conj(X))) / N
    let conj: Vec<Complex64> = x.iter().map(|v| v.conj()).collect();
    let scale = 1.0 / n as f64;
    fft(&conj).into_iter().map(|v| v.conj() * scale).collect()
}
