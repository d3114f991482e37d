//! Running activation histogram and the optimal clipping-threshold search.
//!
//! Calibration is two-pass: a range pass freezes the global min/max (always
//! widened to include 0), then a fill pass accumulates bin counts. Both
//! passes reduce with exactly order-independent operations (min/max and
//! integer-valued f64 additions), so permuting calibration batches cannot
//! change the result.

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

pub const DEFAULT_NBINS: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramObserver {
    nbins: usize,
    lo: f32,
    hi: f32,
    counts: Vec<f64>,
    total: f64,
}

/// Result of the clipping search: thresholds plus derived parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchResult {
    pub a_lo: f32,
    pub a_hi: f32,
    /// Boundary indices `(i, j)` of the winning pair, for oracle comparison.
    pub pair: (usize, usize),
    pub qparams: QuantParams,
}

impl HistogramObserver {
    pub fn new(nbins: usize) -> HistogramObserver {
        assert!(nbins > 0, "histogram needs at least one bin");
        HistogramObserver {
            nbins,
            lo: 0.0,
            hi: 0.0,
            counts: vec![0.0; nbins],
            total: 0.0,
        }
    }

    /// Rebuild an observer from stored state.
    pub fn from_raw(lo: f32, hi: f32, counts: Vec<f64>) -> Result<HistogramObserver> {
        if counts.is_empty() {
            return Err(Error::EmptyHistogram);
        }
        if !(lo <= 0.0 && 0.0 <= hi) {
            return Err(Error::InvalidQparams(format!(
                "histogram range [{lo}, {hi}] must contain 0"
            )));
        }
        if counts.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::InvalidQparams("negative bin count".into()));
        }
        let total = counts.iter().sum();
        Ok(HistogramObserver {
            nbins: counts.len(),
            lo,
            hi,
            counts,
            total,
        })
    }

    pub fn nbins(&self) -> usize {
        self.nbins
    }

    pub fn range(&self) -> (f32, f32) {
        (self.lo, self.hi)
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn total_mass(&self) -> f64 {
        self.total
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi as f64 - self.lo as f64) / self.nbins as f64
    }

    /// Candidate clipping boundary `t` in `0..=nbins`.
    pub fn boundary(&self, t: usize) -> f64 {
        self.lo as f64 + t as f64 * self.bin_width()
    }

    /// Pass 1: widen the range to cover `x` (and always 0).
    pub fn observe_range(&mut self, x: &Tensor) -> Result<()> {
        for v in x.as_f32()? {
            if !v.is_finite() {
                return Err(Error::NonFinite("activation histogram input".into()));
            }
            self.lo = self.lo.min(*v);
            self.hi = self.hi.max(*v);
        }
        Ok(())
    }

    /// Merge two pass-1 ranges.
    pub fn merge_range(&mut self, other: &HistogramObserver) -> Result<()> {
        if self.nbins != other.nbins {
            return Err(Error::DimensionMismatch(format!(
                "cannot merge histograms with {} and {} bins",
                self.nbins, other.nbins
            )));
        }
        self.lo = self.lo.min(other.lo);
        self.hi = self.hi.max(other.hi);
        Ok(())
    }

    /// Pass 2: bin every value against the frozen range. The last bin is
    /// closed; a value outside the range signals a pass-ordering bug.
    pub fn observe_values(&mut self, x: &Tensor) -> Result<()> {
        let width = self.bin_width();
        for &v in x.as_f32()? {
            if v < self.lo || v > self.hi {
                return Err(Error::HistogramRange {
                    value: v,
                    lo: self.lo,
                    hi: self.hi,
                });
            }
            let idx = if width == 0.0 {
                0
            } else {
                let i = ((v as f64 - self.lo as f64) / width).floor() as usize;
                i.min(self.nbins - 1)
            };
            self.counts[idx] += 1.0;
            self.total += 1.0;
        }
        Ok(())
    }

    /// Merge two pass-2 observers filled against identical frozen ranges.
    pub fn merge_counts(&mut self, other: &HistogramObserver) -> Result<()> {
        if self.nbins != other.nbins || self.lo != other.lo || self.hi != other.hi {
            return Err(Error::DimensionMismatch(
                "cannot merge counts of histograms with different ranges".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    /// Search boundary pairs `(i, j)`, `0 <= i < j <= nbins`, constrained to
    /// `boundary(i) <= 0 <= boundary(j)`, minimizing the expected squared
    /// quantization error
    ///
    /// `E(i,j) = sum_{b<i} m_b (c_b - a_l)^2 + sum_{b>=j} m_b (c_b - a_h)^2
    ///           + sum_{i<=b<j} m_b s^2 / 12`
    ///
    /// with `s = (a_h - a_l) / (2^k - 1)`. Clipped-mass sums are O(1) per
    /// pair via prefix sums; ties break toward smaller `i`, then larger `j`.
    pub fn search(&self, bits: u8) -> Result<SearchResult> {
        if self.total <= 0.0 {
            return Err(Error::EmptyHistogram);
        }
        if self.bin_width() == 0.0 {
            // Every observed value was exactly 0. Any bracket has zero error
            // and zero width; fall back to unit scale so zeros stay exact.
            let qparams = QuantParams::activation(1.0, 0, bits)?;
            return Ok(SearchResult {
                a_lo: 0.0,
                a_hi: 0.0,
                pair: (0, self.nbins),
                qparams,
            });
        }

        let n = self.nbins;
        let width = self.bin_width();
        // Prefix sums of m, m*c, m*c^2 over bins < t.
        let mut s0 = vec![0.0f64; n + 1];
        let mut s1 = vec![0.0f64; n + 1];
        let mut s2 = vec![0.0f64; n + 1];
        for b in 0..n {
            let c = self.lo as f64 + (b as f64 + 0.5) * width;
            let m = self.counts[b];
            s0[b + 1] = s0[b] + m;
            s1[b + 1] = s1[b] + m * c;
            s2[b + 1] = s2[b] + m * c * c;
        }
        let levels = ((1i64 << bits) - 1) as f64;

        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            let a_l = self.boundary(i);
            if a_l > 0.0 {
                break;
            }
            let left = s2[i] - 2.0 * a_l * s1[i] + a_l * a_l * s0[i];
            for j in (i + 1)..=n {
                let a_h = self.boundary(j);
                if a_h < 0.0 {
                    continue;
                }
                let right = (s2[n] - s2[j]) - 2.0 * a_h * (s1[n] - s1[j])
                    + a_h * a_h * (s0[n] - s0[j]);
                let mid_mass = s0[j] - s0[i];
                let s = (a_h - a_l) / levels;
                let e = left + right + mid_mass * s * s / 12.0;
                let improves = match best {
                    None => true,
                    // Strict ordering plus smaller-i / larger-j tie-breaks;
                    // i is scanned ascending and j ascending, so equality on
                    // E accepts only a larger j at the same i.
                    Some((be, bi, bj)) => e < be || (e == be && i == bi && j > bj),
                };
                if improves {
                    best = Some((e, i, j));
                }
            }
        }
        let (_, i, j) = best.expect("boundary(0) <= 0 <= boundary(nbins) always yields a pair");
        let a_l = self.boundary(i);
        let a_h = self.boundary(j);
        Ok(SearchResult {
            a_lo: a_l as f32,
            a_hi: a_h as f32,
            pair: (i, j),
            qparams: QuantParams::activation_from_range(a_l, a_h, bits)?,
        })
    }
}
