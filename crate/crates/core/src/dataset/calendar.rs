//! Calendar decomposition of interaction timestamps.

use chrono::{DateTime, Datelike, Timelike};

use crate::error::{Error, Result};

/// UTC calendar fields of a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalendarFields {
    pub year: i32,
    pub month: u32,
    pub day: u32,
    pub hour: u32,
    /// Days since Monday, `0..=6`.
    pub weekday: u32,
}

impl CalendarFields {
    /// `(year, month, day)` as floats, the raw inputs of interval features.
    pub fn ymd(&self) -> [f64; 3] {
        [self.year as f64, self.month as f64, self.day as f64]
    }
}

/// Which calendar components form the context vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextMode {
    /// `(year, month, day)`.
    #[default]
    Ymd,
    /// `(year, month, day, hour, weekday)`.
    Extended,
}

impl ContextMode {
    pub fn width(self) -> usize {
        match self {
            ContextMode::Ymd => 3,
            ContextMode::Extended => 5,
        }
    }

    pub fn components(self, fields: &CalendarFields) -> Vec<f64> {
        let mut out = fields.ymd().to_vec();
        if self == ContextMode::Extended {
            out.push(fields.hour as f64);
            out.push(fields.weekday as f64);
        }
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            ContextMode::Ymd => "ymd",
            ContextMode::Extended => "extended",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ymd" => Ok(ContextMode::Ymd),
            "extended" => Ok(ContextMode::Extended),
            other => Err(Error::Config(format!("context must be 'ymd' or 'extended', got '{other}'"))),
        }
    }
}

/// Proleptic-Gregorian UTC fields of `timestamp` seconds since the epoch.
pub fn decompose_timestamp(timestamp: i64) -> Result<CalendarFields> {
    if timestamp < 0 {
        return Err(Error::Schema(format!("negative timestamp {timestamp}")));
    }
    let dt = DateTime::from_timestamp(timestamp, 0)
        .ok_or_else(|| Error::Schema(format!("timestamp {timestamp} out of calendar range")))?;
    Ok(CalendarFields {
        year: dt.year(),
        month: dt.month(),
        day: dt.day(),
        hour: dt.hour(),
        weekday: dt.weekday().num_days_from_monday(),
    })
}

/// Per-component z-scoring fitted on training events.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits mean and population standard deviation per column. A column with
    /// zero spread keeps unit scale.
    pub fn fit<'a>(width: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        for row in rows {
            n += 1;
            for j in 0..width {
                sum[j] += row[j];
                sq[j] += row[j] * row[j];
            }
        }
        if n == 0 {
            return Standardizer {
                mean: vec![0.0; width],
                std: vec![1.0; width],
            };
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = (0..width)
            .map(|j| {
                let var = (sq[j] / n as f64 - mean[j] * mean[j]).max(0.0);
                let s = var.sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}
