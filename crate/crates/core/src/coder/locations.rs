//! Anchor locations on a fixed-point grid, sorted by Morton code and
//! delta coded per axis with adaptive bit-length models.

use super::range::{RangeDecoder, RangeEncoder};
use super::tables::AdaptiveInt;
use crate::error::{Error, Result};
use crate::math::Vec3;

/// Cells per axis must stay below this.
pub const MAX_CELLS: u32 = 1 << 21;
/// Grid step relative to the bounding-box diagonal.
pub const RELATIVE_STEP: f64 = 1e-3;
const DELTA_BITS: u32 = 22;

/// Quantization grid, stored in the header as f32 so that the decoder sees
/// exactly the same numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationGrid {
    pub origin: [f32; 3],
    pub step: f32,
}

impl LocationGrid {
    pub fn new(origin: [f32; 3], step: f32) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() || origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!("location grid step {step}")));
        }
        Ok(LocationGrid { origin, step })
    }

    /// Origin at the bounding-box minimum, step a fixed fraction of the
    /// diagonal.
    pub fn for_points(points: &[Vec3]) -> Self {
        Self::with_relative_step(points, RELATIVE_STEP)
    }

    pub fn with_relative_step(points: &[Vec3], relative: f64) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        if points.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let diag = (0..3).map(|d| (hi[d] - lo[d]).powi(2)).sum::<f64>().sqrt();
        let step = if diag > 0.0 { relative * diag } else { relative };
        // Round the origin down so no point lands at a negative cell.
        let origin = lo.map(|v| {
            let o = v as f32;
            if o as f64 > v {
                o.next_down()
            } else {
                o
            }
        });
        LocationGrid {
            origin,
            step: step as f32,
        }
    }

    pub fn quantize(&self, p: Vec3) -> Result<[u32; 3]> {
        let mut cell = [0u32; 3];
        for d in 0..3 {
            let c = ((p[d] - self.origin[d] as f64) / self.step as f64).round_ties_even();
            if !(c >= 0.0 && c < MAX_CELLS as f64) {
                return Err(Error::GridOverflow);
            }
            cell[d] = c as u32;
        }
        Ok(cell)
    }

    pub fn dequantize(&self, cell: [u32; 3]) -> Vec3 {
        std::array::from_fn(|d| self.origin[d] as f64 + cell[d] as f64 * self.step as f64)
    }
}

fn spread(v: u32) -> u64 {
    let mut x = v as u64 & 0x1F_FFFF;
    x = (x | (x << 32)) & 0x001F_0000_0000_FFFF;
    x = (x | (x << 16)) & 0x001F_0000_FF00_00FF;
    x = (x | (x << 8)) & 0x100F_00F0_0F00_F00F;
    x = (x | (x << 4)) & 0x10C3_0C30_C30C_30C3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// Interleaves the low 21 bits of each axis, x lowest.
pub fn morton_code(cell: [u32; 3]) -> u64 {
    spread(cell[0]) | (spread(cell[1]) << 1) | (spread(cell[2]) << 2)
}

/// Storage permutation: ascending Morton code, ties by original index.
pub fn morton_order(cells: &[[u32; 3]]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by_key(|&i| (morton_code(cells[i]), i));
    order
}

/// Codes cells in the given order as per-axis deltas from the previous one.
pub fn encode_cells(cells: &[[u32; 3]]) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    let mut models = [(); 3].map(|_| AdaptiveInt::new(DELTA_BITS));
    let mut prev = [0i64; 3];
    for c in cells {
        for d in 0..3 {
            let v = c[d] as i64;
            models[d].encode(&mut enc, v - prev[d]);
            prev[d] = v;
        }
    }
    enc.finish()
}

pub fn decode_cells(bytes: &[u8], count: usize) -> Result<Vec<[u32; 3]>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut models = [(); 3].map(|_| AdaptiveInt::new(DELTA_BITS));
    let mut prev = [0i64; 3];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut cell = [0u32; 3];
        for d in 0..3 {
            let v = prev[d] + models[d].decode(&mut dec)?;
            if !(0..MAX_CELLS as i64).contains(&v) {
                return Err(Error::GridOverflow);
            }
            cell[d] = v as u32;
            prev[d] = v;
        }
        out.push(cell);
    }
    Ok(out)
}

/// Quantizes, sorts into Morton order and codes. Returns the bytes and the
/// permutation applied (`order[j]` is the input index stored at slot `j`).
pub fn encode_locations(points: &[Vec3], grid: &LocationGrid) -> Result<(Vec<u8>, Vec<usize>)> {
    let cells = points
        .iter()
        .map(|&p| grid.quantize(p))
        .collect::<Result<Vec<_>>>()?;
    let order = morton_order(&cells);
    let sorted: Vec<[u32; 3]> = order.iter().map(|&i| cells[i]).collect();
    Ok((encode_cells(&sorted), order))
}

/// Dequantized locations in stored (Morton) order.
pub fn decode_locations(bytes: &[u8], count: usize, grid: &LocationGrid) -> Result<Vec<Vec3>> {
    Ok(decode_cells(bytes, count)?
        .into_iter()
        .map(|c| grid.dequantize(c))
        .collect())
}

/// Coded size of the location section in bits.
pub fn estimate_location_bits(points: &[Vec3], grid: &LocationGrid) -> Result<f64> {
    Ok(8.0 * encode_locations(points, grid)?.0.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn morton_interleaves() {
        assert_eq!(morton_code([1, 0, 0]), 1);
        assert_eq!(morton_code([0, 1, 0]), 2);
        assert_eq!(morton_code([0, 0, 1]), 4);
        assert_eq!(morton_code([3, 0, 0]), 0b1001);
        let m = MAX_CELLS - 1;
        assert_eq!(morton_code([m, m, m]), (1u64 << 63) - 1);
    }

    #[test]
    fn single_anchor_roundtrips() {
        let p = [[0.3, -1.2, 4.0]];
        let grid = LocationGrid::for_points(&p);
        let (bytes, order) = encode_locations(&p, &grid).unwrap();
        assert_eq!(order, vec![0]);
        let out = decode_locations(&bytes, 1, &grid).unwrap();
        assert_eq!(out[0], grid.dequantize(grid.quantize(p[0]).unwrap()));
    }

    #[test]
    fn one_step_apart_gives_unit_delta() {
        let cells = [[10, 20, 30], [11, 20, 30]];
        let bytes = encode_cells(&cells);
        assert_eq!(decode_cells(&bytes, 2).unwrap(), cells);
        let mut enc = RangeEncoder::new();
        let mut m = [(); 3].map(|_| AdaptiveInt::new(DELTA_BITS));
        let mut prev = [0i64; 3];
        let mut deltas = vec![];
        for c in &cells {
            for d in 0..3 {
                deltas.push(c[d] as i64 - prev[d]);
                m[d].encode(&mut enc, c[d] as i64 - prev[d]);
                prev[d] = c[d] as i64;
            }
        }
        assert_eq!(&deltas[3..], &[1, 0, 0]);
    }

    #[test]
    fn overflow_is_reported() {
        let grid = LocationGrid::new([0.0; 3], 1.0).unwrap();
        assert!(matches!(grid.quantize([3e6, 0.0, 0.0]), Err(Error::GridOverflow)));
        assert!(matches!(grid.quantize([-5.0, 0.0, 0.0]), Err(Error::GridOverflow)));
    }
}
