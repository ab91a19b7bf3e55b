//! FP8 (E4M3) block quantization with one F32 scale per 128 elements.

use std::sync::OnceLock;

use crate::error::{EpError, Result};

/// Elements sharing one scale.
pub const QUANT_BLOCK: usize = 128;

/// Largest finite E4M3 magnitude.
pub const E4M3_MAX: f32 = 448.0;

const E4M3_NAN: u8 = 0x7f;

/// Value of an E4M3 code. Codes 0x7f and 0xff are NaN.
pub fn e4m3_to_f32(code: u8) -> f32 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let bits = code & 0x7f;
    if bits == E4M3_NAN {
        return f32::NAN;
    }
    let exp = (bits >> 3) as i32;
    let mant = (bits & 0x07) as f32;
    let magnitude = if exp == 0 {
        mant / 8.0 * 2f32.powi(-6)
    } else {
        (1.0 + mant / 8.0) * 2f32.powi(exp - 7)
    };
    sign * magnitude
}

/// Non-negative finite E4M3 magnitudes, indexed by code (0x00..=0x7e).
fn positive_table() -> &'static [f32; 127] {
    static TABLE: OnceLock<[f32; 127]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0f32; 127];
        for (code, slot) in t.iter_mut().enumerate() {
            *slot = e4m3_to_f32(code as u8);
        }
        t
    })
}

/// Nearest E4M3 code, ties to even mantissa, saturating at +-448.
pub fn f32_to_e4m3(x: f32) -> u8 {
    if x.is_nan() {
        return E4M3_NAN;
    }
    let sign = if x.is_sign_negative() && x != 0.0 { 0x80 } else { 0 };
    let mag = x.abs();
    let table = positive_table();
    if mag >= E4M3_MAX {
        return sign | 0x7e;
    }
    // first code whose value is >= mag
    let hi = table.partition_point(|&v| v < mag);
    if hi == 0 {
        return 0;
    }
    let lo = hi - 1;
    let (dl, dh) = (mag - table[lo], table[hi] - mag);
    let code = if dl < dh {
        lo
    } else if dh < dl {
        hi
    } else if lo % 2 == 0 {
        lo
    } else {
        hi
    };
    if code == 0 {
        0
    } else {
        sign | code as u8
    }
}

/// `absmax / 448`, rounded up to a 21-bit significand so that `448 * scale`
/// is exact and requantizing a dequantized block reproduces the scale.
fn block_scale(absmax: f32) -> f32 {
    let bits = (absmax / E4M3_MAX).to_bits();
    let rounded = if bits & 0b111 == 0 { bits } else { (bits | 0b111) + 1 };
    f32::from_bits(rounded)
}

/// Quantizes a row into E4M3 codes and per-block scales.
///
/// Each block of 128 elements gets `scale ~= absmax / 448`; an all-zero block
/// gets scale 0 and zero codes.
pub fn quantize_block(row: &[f32]) -> Result<(Vec<u8>, Vec<f32>)> {
    if row.len() % QUANT_BLOCK != 0 {
        return Err(EpError::invalid(format!(
            "row length {} is not a multiple of {QUANT_BLOCK}",
            row.len()
        )));
    }
    let mut codes = Vec::with_capacity(row.len());
    let mut scales = Vec::with_capacity(row.len() / QUANT_BLOCK);
    for block in row.chunks_exact(QUANT_BLOCK) {
        let absmax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if absmax == 0.0 {
            scales.push(0.0);
            codes.extend(std::iter::repeat_n(0u8, QUANT_BLOCK));
            continue;
        }
        let scale = block_scale(absmax);
        scales.push(scale);
        codes.extend(block.iter().map(|&v| f32_to_e4m3(v / scale)));
    }
    Ok((codes, scales))
}

pub fn dequantize_block(codes: &[u8], scales: &[f32]) -> Result<Vec<f32>> {
    if codes.len() != QUANT_BLOCK * scales.len() {
        return Err(EpError::invalid(format!(
            "{} codes do not match {} scales",
            codes.len(),
            scales.len()
        )));
    }
    Ok(codes
        .chunks_exact(QUANT_BLOCK)
        .zip(scales)
        .flat_map(|(block, &scale)| {
            block.iter().map(move |&c| if scale == 0.0 { 0.0 } else { e4m3_to_f32(c) * scale })
        })
        .collect())
}
