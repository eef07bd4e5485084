//! C99-style hexadecimal float literals (`0x1.8p+1`), exact for every finite
//! `f64`.

const MANT_BITS: u32 = 52;
const MANT_MASK: u64 = (1 << MANT_BITS) - 1;
const EXP_BIAS: i64 = 1023;

/// Formats a finite double as a canonical hex float. Non-finite values are
/// formatted as `inf`/`nan` and rejected by [`parse`].
pub fn format(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let exp_field = ((bits >> MANT_BITS) & 0x7ff) as i64;
    let mant = bits & MANT_MASK;
    if exp_field == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_field == 0 {
        (0, 1 - EXP_BIAS)
    } else {
        (1, exp_field - EXP_BIAS)
    };
    let digits = format!("{mant:013x}");
    let digits = digits.trim_end_matches('0');
    if digits.is_empty() {
        format!("{sign}0x{lead}p{exp:+}")
    } else {
        format!("{sign}0x{lead}.{digits}p{exp:+}")
    }
}

/// Parses the format produced by [`format`].
pub fn parse(s: &str) -> Result<f64, String> {
    let bad = |why: &str| format!("invalid hex float {s:?}: {why}");
    let (negative, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(|| bad("missing 0x prefix"))?;
    let (mantissa, exponent) = rest.split_once('p').ok_or_else(|| bad("missing exponent"))?;
    let exp: i64 = exponent.parse().map_err(|_| bad("bad exponent"))?;
    let (lead, frac) = match mantissa.split_once('.') {
        Some((l, f)) => (l, f),
        None => (mantissa, ""),
    };
    if frac.len() > 13 || (mantissa.contains('.') && frac.is_empty()) {
        return Err(bad("fraction must have 1 to 13 hex digits"));
    }
    let frac_bits = if frac.is_empty() {
        0
    } else {
        if !frac.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(bad("non-hex digit in fraction"));
        }
        u64::from_str_radix(frac, 16).map_err(|_| bad("bad fraction"))? << (4 * (13 - frac.len()))
    };
    let bits = match lead {
        "1" => {
            let field = exp + EXP_BIAS;
            if !(1..=2046).contains(&field) {
                return Err(bad("exponent out of range"));
            }
            ((field as u64) << MANT_BITS) | frac_bits
        }
        "0" if frac_bits == 0 => 0,
        "0" => {
            if exp != 1 - EXP_BIAS {
                return Err(bad("subnormal must use exponent -1022"));
            }
            frac_bits
        }
        _ => return Err(bad("leading digit must be 0 or 1")),
    };
    let value = f64::from_bits(bits);
    Ok(if negative { -value } else { value })
}
