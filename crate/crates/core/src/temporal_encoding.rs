//! Sinusoidal day-of-year encodings injected into the model input.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DAYS_PER_YEAR: f64 = 365.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayEncoding {
    pub day: u16,
    pub e_s: f64,
    pub e_c: f64,
}

/// How the two encoding scalars are combined with the channels of one timepoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingMode {
    /// `e_s` on the first `ceil(C/2)` channels, `e_c` on the rest.
    #[default]
    Split,
    /// `e_s + e_c` on every channel.
    Sum,
}

pub fn encode_day(day: i64) -> Result<DayEncoding> {
    if !(1..=365).contains(&day) {
        return Err(Error::DayOutOfRange(day));
    }
    let angle = 2.0 * PI * day as f64 / DAYS_PER_YEAR;
    Ok(DayEncoding {
        day: day as u16,
        e_s: angle.sin(),
        e_c: angle.cos(),
    })
}

/// Per-timepoint, per-channel offsets; shape `(dates.len(), channels)`.
pub fn encoding_offsets(dates: &[u16], channels: usize, mode: EncodingMode) -> Result<Vec<f64>> {
    let split = channels.div_ceil(2);
    let mut out = Vec::with_capacity(dates.len() * channels);
    for &d in dates {
        let e = encode_day(d as i64)?;
        for c in 0..channels {
            out.push(match mode {
                EncodingMode::Split if c < split => e.e_s,
                EncodingMode::Split => e.e_c,
                EncodingMode::Sum => e.e_s + e.e_c,
            });
        }
    }
    Ok(out)
}

/// Returns `tensor` (layout `[t][c][pixel]`) with each timepoint's encoding added at every pixel.
pub fn apply_encoding<T: Scalar>(
    tensor: &[T],
    channels: usize,
    dates: &[u16],
    mode: EncodingMode,
) -> Result<Vec<T>> {
    let mut out = tensor.to_vec();
    add_encoding_in_place(&mut out, channels, dates, mode)?;
    Ok(out)
}

pub(crate) fn add_encoding_in_place<T: Scalar>(
    tensor: &mut [T],
    channels: usize,
    dates: &[u16],
    mode: EncodingMode,
) -> Result<()> {
    let planes = dates.len() * channels;
    if channels == 0 || planes == 0 || !tensor.len().is_multiple_of(planes) {
        return Err(Error::ShapeMismatch(format!(
            "tensor of {} elements is not divisible into {} timepoints x {} channels",
            tensor.len(),
            dates.len(),
            channels
        )));
    }
    let pixels = tensor.len() / planes;
    let offsets = encoding_offsets(dates, channels, mode)?;
    for (plane, off) in tensor.chunks_exact_mut(pixels).zip(offsets) {
        let off = T::from_f64_lossy(off);
        plane.iter_mut().for_each(|v| *v += off);
    }
    Ok(())
}
