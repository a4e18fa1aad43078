//! The 50 µm displacement grid shared by press profiles, fitted curves and
//! actuation tables.

use serde::{Deserialize, Serialize};

/// Bin width in millimetres.
pub const BIN_MM: f64 = 0.05;

/// Uniform displacement bins covering `[0, travel_range]`.
///
/// Bin `i` spans `[i * BIN_MM, (i + 1) * BIN_MM)`; the final bin is closed so
/// that a displacement equal to the travel range still maps somewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplacementGrid {
    travel_range: f64,
    len: usize,
}

impl DisplacementGrid {
    pub fn new(travel_range: f64) -> Self {
        assert!(
            travel_range.is_finite() && travel_range > 0.0,
            "travel range must be positive, got {travel_range}"
        );
        Self {
            travel_range,
            len: bin_count(travel_range),
        }
    }

    pub fn travel_range(&self) -> f64 {
        self.travel_range
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Left edge of bin `i`.
    pub fn edge(&self, i: usize) -> f64 {
        i as f64 * BIN_MM
    }

    /// Representative displacement of bin `i`, clipped to the travel range.
    pub fn center(&self, i: usize) -> f64 {
        ((i as f64 + 0.5) * BIN_MM).min(self.travel_range)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.center(i)).collect()
    }

    /// Bin containing `d`, or `None` outside `[0, travel_range]`.
    pub fn bin_of(&self, d: f64) -> Option<usize> {
        if !(d >= 0.0 && d <= self.travel_range + 1e-9) {
            return None;
        }
        Some(self.bin_clamped(d))
    }

    /// Bin containing `d` after clamping into the grid.
    pub fn bin_clamped(&self, d: f64) -> usize {
        if d <= 0.0 || d.is_nan() {
            return 0;
        }
        // The small slack keeps exact multiples of the bin width (which are
        // rarely exact in binary) in the bin they nominally start.
        let i = ((d + 1e-9) / BIN_MM).floor() as usize;
        i.min(self.len - 1)
    }
}

/// `ceil(travel_range / BIN_MM)`, tolerant to representation error.
pub fn bin_count(travel_range: f64) -> usize {
    ((travel_range / BIN_MM) - 1e-9).ceil().max(1.0) as usize
}

/// Fills `None` entries by linear interpolation between the nearest measured
/// neighbours; leading/trailing gaps copy the nearest measured value.
/// Returns `None` when nothing was measured.
pub fn fill_gaps(values: &[Option<f64>]) -> Option<Vec<f64>> {
    let known: Vec<usize> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|_| i))
        .collect();
    let (&first, &last) = (known.first()?, known.last()?);
    let mut out = vec![0.0; values.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = match values[i] {
            Some(v) => v,
            None if i < first => values[first].unwrap(),
            None if i > last => values[last].unwrap(),
            None => {
                let hi = known.partition_point(|&k| k < i);
                let (a, b) = (known[hi - 1], known[hi]);
                let (va, vb) = (values[a].unwrap(), values[b].unwrap());
                let w = (i - a) as f64 / (b - a) as f64;
                va + w * (vb - va)
            }
        };
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_millimetre_button_has_eighty_bins() {
        assert_eq!(bin_count(4.0), 80);
        assert_eq!(bin_count(3.6), 72);
        assert_eq!(bin_count(2.2), 44);
        assert_eq!(bin_count(6.2), 124);
        assert_eq!(bin_count(4.01), 81);
    }

    #[test]
    fn bin_edges_and_ends() {
        let g = DisplacementGrid::new(4.0);
        assert_eq!(g.bin_of(0.0), Some(0));
        assert_eq!(g.bin_of(0.05), Some(1));
        assert_eq!(g.bin_of(0.0999), Some(1));
        assert_eq!(g.bin_of(4.0), Some(79));
        assert_eq!(g.bin_of(4.2), None);
        assert_eq!(g.bin_of(-0.01), None);
        assert_eq!(g.bin_clamped(9.0), 79);
    }

    #[test]
    fn gaps_are_interpolated() {
        let v = fill_gaps(&[None, Some(1.0), None, None, Some(4.0), None]).unwrap();
        assert_eq!(v, vec![1.0, 1.0, 2.0, 3.0, 4.0, 4.0]);
        assert!(fill_gaps(&[None, None]).is_none());
    }
}
