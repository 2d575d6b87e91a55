//! C99 `%a`-style hexadecimal float encoding, exact for every finite `f64`.

use crate::error::{Error, Result};

const MANT_BITS: u32 = 52;
const MANT_MASK: u64 = (1 << MANT_BITS) - 1;

pub fn format(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let biased = ((bits >> MANT_BITS) & 0x7ff) as i64;
    let mant = bits & MANT_MASK;
    if biased == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if biased == 0 { (0, -1022) } else { (1, biased - 1023) };
    let mut frac = format!("{mant:013x}");
    while frac.ends_with('0') {
        frac.pop();
    }
    let frac = if frac.is_empty() { String::new() } else { format!(".{frac}") };
    let exp_sign = if exp >= 0 { "+" } else { "-" };
    format!("{sign}0x{lead}{frac}p{exp_sign}{}", exp.abs())
}

pub fn parse(s: &str) -> Result<f64> {
    let bad = || Error::Format(format!("bad hex float {s:?}"));
    match s {
        "nan" => return Ok(f64::NAN),
        "inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(bad)?;
    let (mant_str, exp_str) = rest.split_once('p').ok_or_else(bad)?;
    let exp: i64 = exp_str.parse().map_err(|_| bad())?;
    let (lead_str, frac_str) = mant_str.split_once('.').unwrap_or((mant_str, ""));
    if frac_str.len() > 13 || lead_str.len() != 1 {
        return Err(bad());
    }
    let lead = u64::from_str_radix(lead_str, 16).map_err(|_| bad())?;
    let frac = if frac_str.is_empty() {
        0
    } else {
        u64::from_str_radix(frac_str, 16).map_err(|_| bad())? << (4 * (13 - frac_str.len()))
    };
    let bits = match lead {
        0 if frac == 0 => 0,
        0 if exp == -1022 => frac,
        1 if (-1022..=1023).contains(&exp) => (((exp + 1023) as u64) << MANT_BITS) | frac,
        _ => return Err(bad()),
    };
    let v = f64::from_bits(bits);
    Ok(if neg { -v } else { v })
}
