//! The multi-periodicity transform.
//!
//! A three-phase window is summarized by its phase-averaged amplitude
//! spectrum, the `k` strongest non-DC lines give `k` candidate periods, and
//! each period folds the 1-D signal into a `[rows, period]` grid so that
//! columns index the position inside one period and rows index successive
//! periods. [`unfold`] is the inverse and drops the zero padding.
//!
//! Period selection is a routing decision: it is computed on plain values and
//! never differentiated.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::fft::magnitude_spectrum;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// How a spectral line index is turned into a period.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum PeriodConvention {
    /// `f` is the bin index (cycles per window), so `ceil(L / f)` is the
    /// period in samples.
    BinIndex,
    /// `f` is the line frequency in Hz, `bin * sample_rate / L`, and the
    /// period is `ceil(L / f)` taken literally.
    PaperLiteral { sample_rate_hz: f64 },
}

impl Default for PeriodConvention {
    fn default() -> Self {
        Self::BinIndex
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodSet {
    /// Distinct periods in samples, strongest line first.
    pub periods: Vec<usize>,
    /// Spectral amplitude of the line that produced each period.
    pub amplitudes: Vec<f64>,
    /// Bin index of that line.
    pub bins: Vec<usize>,
    pub convention: PeriodConvention,
}

/// A `[channels, rows, period]` view of a `[channels, len]` signal.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedView {
    pub tensor: Tensor,
    pub period: usize,
    pub len: usize,
    pub pad_len: usize,
}

impl FoldedView {
    pub fn rows(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// Mean over channels of the single-sided magnitude spectrum, `L/2 + 1` bins.
pub fn averaged_spectrum(channels: &[&[f64]]) -> Result<Vec<f64>> {
    let first = channels.first().ok_or_else(|| Error::Argument("no channels".into()))?;
    let len = first.len();
    if len < 2 {
        return Err(Error::Argument(format!("signal length {len} < 2")));
    }
    let mut acc = vec![0.0; len / 2 + 1];
    for ch in channels {
        if ch.len() != len {
            return Err(Error::Dimension(format!("channel lengths {} and {len} differ", ch.len())));
        }
        if ch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite sample in signal".into()));
        }
        for (a, m) in acc.iter_mut().zip(magnitude_spectrum(ch)) {
            *a += m;
        }
    }
    let inv = 1.0 / channels.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

fn period_of(bin: usize, len: usize, convention: PeriodConvention) -> usize {
    match convention {
        PeriodConvention::BinIndex => len.div_ceil(bin),
        PeriodConvention::PaperLiteral { sample_rate_hz } => {
            let f_hz = bin as f64 * sample_rate_hz / len as f64;
            let p = libm::ceil(len as f64 / f_hz);
            (p as usize).clamp(1, len)
        }
    }
}

/// The `k` distinct periods of the strongest non-DC lines of `spectrum`.
///
/// Lines are ranked by amplitude, ties going to the lower bin. A line whose
/// period was already taken is skipped and ranking continues downwards.
pub fn top_k_periods(spectrum: &[f64], k: usize, len: usize, convention: PeriodConvention) -> Result<PeriodSet> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if spectrum.len() < 2 {
        return Err(Error::Argument("spectrum has no non-DC bins".into()));
    }
    if spectrum.iter().any(|a| !a.is_finite()) {
        return Err(Error::Domain("non-finite spectral amplitude".into()));
    }
    if spectrum[1..].iter().all(|&a| a <= 0.0) {
        return Err(Error::Degenerate("all-zero spectrum has no dominant period".into()));
    }
    let mut order: Vec<usize> = (1..spectrum.len()).collect();
    // stable sort keeps lower bins first among equal amplitudes
    order.sort_by(|&a, &b| spectrum[b].total_cmp(&spectrum[a]));

    let mut set = PeriodSet { periods: Vec::new(), amplitudes: Vec::new(), bins: Vec::new(), convention };
    for bin in order {
        let p = period_of(bin, len, convention);
        if set.periods.contains(&p) {
            continue;
        }
        set.periods.push(p);
        set.amplitudes.push(spectrum[bin]);
        set.bins.push(bin);
        if set.periods.len() == k {
            return Ok(set);
        }
    }
    Err(Error::Argument(format!(
        "only {} distinct periods available, {k} requested",
        set.periods.len()
    )))
}

/// Convenience: spectrum then top-k for a multi-channel window.
pub fn dominant_periods(channels: &[&[f64]], k: usize, convention: PeriodConvention) -> Result<PeriodSet> {
    let spec = averaged_spectrum(channels)?;
    top_k_periods(&spec, k, channels[0].len(), convention)
}

/// Folds `[C, L]` into `[C, ceil(L/p), p]`, zero-padding the tail.
pub fn fold(x: &Tensor, period: usize) -> Result<FoldedView> {
    if x.ndim() != 2 {
        return Err(Error::Dimension(format!("fold expects [C, L], got {:?}", x.shape())));
    }
    let (c, len) = (x.shape()[0], x.shape()[1]);
    if period < 1 || period > len {
        return Err(Error::Argument(format!("period {period} outside 1..={len}")));
    }
    let rows = len.div_ceil(period);
    let data = crate::tensor::graph_repack(x.data(), len, rows * period);
    Ok(FoldedView {
        tensor: Tensor::new(&[c, rows, period], data)?,
        period,
        len,
        pad_len: rows * period - len,
    })
}

/// Inverse of [`fold`]; whatever sits in the padded cells is dropped.
pub fn unfold(view: &FoldedView, len: usize) -> Result<Tensor> {
    let s = view.tensor.shape();
    if s.len() != 3 || s[2] != view.period {
        return Err(Error::Dimension(format!("folded tensor {s:?} does not match period {}", view.period)));
    }
    let cells = s[1] * s[2];
    if len == 0 || len > cells || cells - len >= s[2] {
        return Err(Error::Dimension(format!("view {s:?} inconsistent with length {len}")));
    }
    let data = crate::tensor::graph_repack(view.tensor.data(), cells, len);
    Tensor::new(&[s[0], len], data)
}
