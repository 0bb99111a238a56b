//! Mean-threshold binarization and integer state codes.
//!
//! Bit order is little-endian: unit `i` contributes `2^i`, so unit 0 is the
//! least significant bit of every code.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AtlasMapping, Network, TimeSeriesMatrix};

/// Largest number of units whose `2^N` state space is enumerated exactly.
pub const MAX_UNITS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryStateSequence {
    n_units: usize,
    states: Array2<u8>,
    codes: Vec<u32>,
    activation_ratio: Vec<f64>,
}

impl BinaryStateSequence {
    pub fn from_states(states: Array2<u8>) -> Result<Self> {
        let codes = encode_states(&states)?;
        let t = states.nrows() as f64;
        let activation_ratio = states
            .columns()
            .into_iter()
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / t)
            .collect();
        Ok(Self { n_units: states.ncols(), states, codes, activation_ratio })
    }

    pub fn from_codes(codes: &[u32], n_units: usize) -> Result<Self> {
        check_capacity(n_units)?;
        let limit = 1u64 << n_units;
        let mut states = Array2::zeros((codes.len(), n_units));
        for (t, &code) in codes.iter().enumerate() {
            if code as u64 >= limit {
                return Err(Error::Range(format!(
                    "state code {code} out of range for {n_units} units"
                )));
            }
            for i in 0..n_units {
                states[[t, i]] = ((code >> i) & 1) as u8;
            }
        }
        Self::from_states(states)
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// `[T x N]` matrix of 0/1 entries.
    pub fn states(&self) -> &Array2<u8> {
        &self.states
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn activation_ratio(&self) -> &[f64] {
        &self.activation_ratio
    }
}

pub(crate) fn check_capacity(n: usize) -> Result<()> {
    if n > MAX_UNITS {
        Err(Error::Capacity { n, max: MAX_UNITS })
    } else {
        Ok(())
    }
}

/// `code_t = sum_i x_ti * 2^i`.
pub fn encode_states(states: &Array2<u8>) -> Result<Vec<u32>> {
    check_capacity(states.ncols())?;
    states
        .rows()
        .into_iter()
        .enumerate()
        .map(|(t, row)| {
            row.iter().enumerate().try_fold(0u32, |code, (i, &x)| match x {
                0 => Ok(code),
                1 => Ok(code | (1 << i)),
                other => Err(Error::Validation(format!(
                    "state entry {other} at row {t}, unit {i} is not binary"
                ))),
            })
        })
        .collect()
}

pub fn decode_state(code: u32, n_units: usize) -> Vec<u8> {
    (0..n_units).map(|i| ((code >> i) & 1) as u8).collect()
}

fn binarize_column(column: ArrayView1<'_, f64>, index: usize) -> Result<Vec<u8>> {
    let first = column[0];
    if column.iter().all(|&v| v == first) {
        return Err(Error::DegenerateColumn { column: index });
    }
    let mean = column.sum() / column.len() as f64;
    let bits: Vec<u8> = column.iter().map(|&v| u8::from(v > mean)).collect();
    if bits.iter().all(|&b| b == 0) {
        // only reachable when rounding pushes the mean onto the maximum
        return Err(Error::DegenerateColumn { column: index });
    }
    Ok(bits)
}

/// Active (1) iff strictly above the column mean; values equal to the mean
/// are inactive.
pub fn binarize_mean(signals: &Array2<f64>) -> Result<BinaryStateSequence> {
    let (t, n) = signals.dim();
    if t < 2 {
        return Err(Error::Validation(format!("binarization needs T >= 2, got {t}")));
    }
    check_capacity(n)?;
    let mut states = Array2::zeros((t, n));
    for (i, column) in signals.columns().into_iter().enumerate() {
        let bits = binarize_column(column, i)?;
        for (ti, b) in bits.into_iter().enumerate() {
            states[[ti, i]] = b;
        }
    }
    BinaryStateSequence::from_states(states)
}

/// Sidecar describing a serialized state-code file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSidecar {
    pub unit_names: Vec<String>,
    pub bit_order: String,
    pub n_timepoints: usize,
}

impl StateSidecar {
    pub const BIT_ORDER: &'static str = "little-endian: unit i -> bit i";

    pub fn new(unit_names: Vec<String>, n_timepoints: usize) -> Self {
        Self { unit_names, bit_order: Self::BIT_ORDER.to_string(), n_timepoints }
    }
}

/// Member ROI signals of one canonical network, columns in atlas order.
pub fn select_network_units(
    series: &TimeSeriesMatrix,
    atlas: &AtlasMapping,
    network: &str,
) -> Result<Array2<f64>> {
    let network: Network = network.parse()?;
    let members = atlas.members(network);
    if members.len() < 2 {
        return Err(Error::Validation(format!(
            "network {network} has {} members; at least 2 required",
            members.len()
        )));
    }
    check_capacity(members.len())?;
    let mut out = Array2::zeros((series.n_timepoints(), members.len()));
    for (j, name) in members.iter().enumerate() {
        let idx = series
            .channel_index(name)
            .ok_or_else(|| Error::Validation(format!("atlas channel {name:?} missing from series")))?;
        out.column_mut(j).assign(&series.channel(idx));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn tie_at_mean_is_inactive() {
        let seq = binarize_mean(&array![[1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(seq.states().column(0).to_vec(), vec![0, 0, 1]);
        assert!((seq.activation_ratio()[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_column_reports_index() {
        let err = binarize_mean(&array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateColumn { column: 1 }));
    }

    #[test]
    fn codes_follow_bit_order() {
        let states = array![[0u8, 0, 0], [1, 0, 1], [0, 1, 0]];
        assert_eq!(encode_states(&states).unwrap(), vec![0, 5, 2]);
        assert_eq!(decode_state(5, 3), vec![1, 0, 1]);
        assert!(matches!(
            encode_states(&Array2::zeros((1, 21))),
            Err(Error::Capacity { n: 21, .. })
        ));
        assert!(encode_states(&array![[2u8, 0]]).is_err());
    }

    #[test]
    fn from_codes_rejects_out_of_range() {
        assert!(BinaryStateSequence::from_codes(&[0, 8], 3).is_err());
        let seq = BinaryStateSequence::from_codes(&[0, 7, 3], 3).unwrap();
        assert_eq!(seq.activation_ratio(), &[2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0]);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(rows in prop::collection::vec(prop::collection::vec(0u8..2, 8), 1..40)) {
            let t = rows.len();
            let flat: Vec<u8> = rows.iter().flatten().copied().collect();
            let states = Array2::from_shape_vec((t, 8), flat).unwrap();
            let codes = encode_states(&states).unwrap();
            for (row, code) in rows.iter().zip(&codes) {
                prop_assert!(*code < 256);
                prop_assert_eq!(&decode_state(*code, 8), row);
            }
        }

        #[test]
        fn affine_invariance_and_both_levels(
            values in prop::collection::vec(-1000i32..1000, 2..60),
            scale_exp in 0i32..6,
            shift in -50i32..50,
        ) {
            prop_assume!(values.iter().any(|&v| v != values[0]));
            let col: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let a = 2f64.powi(scale_exp);
            let transformed: Vec<f64> = col.iter().map(|v| a * v + shift as f64).collect();
            let x = Array2::from_shape_vec((col.len(), 1), col).unwrap();
            let y = Array2::from_shape_vec((transformed.len(), 1), transformed).unwrap();
            let bx = binarize_mean(&x).unwrap();
            let by = binarize_mean(&y).unwrap();
            prop_assert_eq!(bx.states(), by.states());
            let ones = bx.states().iter().filter(|&&b| b == 1).count();
            prop_assert!(ones >= 1 && ones < bx.len());
            let mean = ones as f64 / bx.len() as f64;
            prop_assert_eq!(mean, bx.activation_ratio()[0]);
        }
    }
}
