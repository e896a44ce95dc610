//! Contract terms: initial premium and the guaranteed withdrawal schedule.
//!
//! The schedule is piecewise-constant on year segments. Maturity is not an
//! input; it is the first time cumulative withdrawals recover the premium,
//! so the guarantee pays exactly `f0` in total over `[0, T]`.

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One constant-rate piece of the withdrawal schedule, on `[from_year, to_year)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WithdrawalSegment {
    pub from_year: f64,
    pub to_year: f64,
    /// Withdrawal rate on the segment (currency per year).
    pub rate: f64,
}

/// Guaranteed-withdrawal contract: premium `f0` and a withdrawal schedule
/// that must eventually pay the premium back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSpec {
    pub f0: f64,
    /// Contiguous constant-rate segments starting at year 0.
    pub withdrawals: Vec<WithdrawalSegment>,
}

impl ContractSpec {
    /// Constant-rate contract withdrawing `rate` per year until the premium
    /// is recovered at `T = f0 / rate`.
    pub fn constant(f0: f64, rate: f64) -> Self {
        ContractSpec {
            f0,
            withdrawals: vec![WithdrawalSegment {
                from_year: 0.0,
                to_year: f0 / rate,
                rate,
            }],
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.f0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "initial premium f0 = {} must be > 0",
                self.f0
            )));
        }
        if self.withdrawals.is_empty() {
            return Err(Error::InvalidParameter(
                "withdrawal schedule must have at least one segment".to_string(),
            ));
        }
        let mut expected_start = 0.0;
        for (i, seg) in self.withdrawals.iter().enumerate() {
            if (seg.from_year - expected_start).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "withdrawal segment {i} starts at year {} but the previous one ends at {}",
                    seg.from_year, expected_start
                )));
            }
            if !(seg.to_year > seg.from_year) {
                return Err(Error::InvalidParameter(format!(
                    "withdrawal segment {i} has nonpositive length"
                )));
            }
            if seg.rate < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "withdrawal segment {i} has negative rate {}",
                    seg.rate
                )));
            }
            expected_start = seg.to_year;
        }
        // Maturity must exist: the schedule has to pay the premium back.
        self.maturity().map(|_| ())
    }

    /// First time cumulative withdrawals reach `f0`. Errors if the schedule
    /// ends before recovering the premium.
    pub fn maturity(&self) -> Result<f64, Error> {
        let mut cum = 0.0;
        for seg in &self.withdrawals {
            let seg_total = seg.rate * (seg.to_year - seg.from_year);
            if cum + seg_total >= self.f0 {
                return Ok(seg.from_year + (self.f0 - cum) / seg.rate);
            }
            cum += seg_total;
        }
        Err(Error::ScheduleShortfall {
            total: cum,
            f0: self.f0,
        })
    }

    /// Withdrawal rate at time `t`. Segments are half-open on the right;
    /// times at or past the end of the schedule return the last rate, so the
    /// trapezoid endpoint at maturity is well defined.
    pub fn rate_at(&self, t: f64) -> f64 {
        for seg in &self.withdrawals {
            if t < seg.to_year {
                return seg.rate;
            }
        }
        self.withdrawals.last().map(|s| s.rate).unwrap_or(0.0)
    }

    /// Closed-form present value of the full withdrawal stream up to
    /// `t_end`, discounting at rate `r`: the sum of `rate * int exp(-r t) dt`
    /// over each segment clipped to `[0, t_end]`, with the last rate
    /// extended past the schedule end just like `rate_at`.
    pub fn discounted_withdrawals(&self, r: f64, t_end: f64) -> f64 {
        fn piece(r: f64, a: f64, b: f64) -> f64 {
            if r == 0.0 {
                b - a
            } else {
                ((-r * a).exp() - (-r * b).exp()) / r
            }
        }
        let mut total = 0.0;
        for seg in &self.withdrawals {
            let hi = seg.to_year.min(t_end);
            if hi > seg.from_year {
                total += seg.rate * piece(r, seg.from_year, hi);
            }
        }
        if let Some(last) = self.withdrawals.last() {
            if t_end > last.to_year {
                total += last.rate * piece(r, last.to_year, t_end);
            }
        }
        total
    }
}
