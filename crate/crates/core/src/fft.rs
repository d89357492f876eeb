//! Real-input discrete Fourier transform magnitudes.
//!
//! Power-of-two lengths use an iterative radix-2 FFT; other lengths fall back
//! to a direct O(L²) DFT.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

/// `|X[j]|` for `j = 0..=L/2` of the real signal `x`.
pub fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let half = n / 2 + 1;
    if n.is_power_of_two() {
        let (re, im) = fft_radix2(x);
        (0..half).map(|j| libm::hypot(re[j], im[j])).collect()
    } else {
        (0..half)
            .map(|j| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    // reduce the angle index modulo n to keep the argument small
                    let ang = -2.0 * PI * ((j * t) % n) as f64 / n as f64;
                    re += v * libm::cos(ang);
                    im += v * libm::sin(ang);
                }
                libm::hypot(re, im)
            })
            .collect()
    }
}

fn fft_radix2(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut re = x.to_vec();
    let mut im = vec![0.0; n];
    if n <= 1 {
        return (re, im);
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
        }
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let step = -2.0 * PI / size as f64;
        for k in 0..half {
            let (wr, wi) = (libm::cos(step * k as f64), libm::sin(step * k as f64));
            let mut start = 0;
            while start < n {
                let (a, b) = (start + k, start + k + half);
                let tr = wr * re[b] - wi * im[b];
                let ti = wr * im[b] + wi * re[b];
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                start += size;
            }
        }
        size *= 2;
    }
    (re, im)
}
