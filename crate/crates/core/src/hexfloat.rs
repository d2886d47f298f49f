//! C99-style hexadecimal float text (`0x1.8p+1`), exact in both directions.

const MANTISSA_BITS: u32 = 52;
const EXP_BIAS: i32 = 1023;

pub fn format(value: f64) -> String {
    if value.is_nan() {
        return "nan".into();
    }
    let sign = if value.is_sign_negative() { "-" } else { "" };
    if value.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = value.to_bits();
    let exp_field = ((bits >> MANTISSA_BITS) & 0x7ff) as i32;
    let frac = bits & ((1u64 << MANTISSA_BITS) - 1);
    if exp_field == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_field == 0 {
        (0, 1 - EXP_BIAS)
    } else {
        (1, exp_field - EXP_BIAS)
    };
    let digits = format!("{frac:013x}");
    let digits = digits.trim_end_matches('0');
    let exp_sign = if exp < 0 { '-' } else { '+' };
    if digits.is_empty() {
        format!("{sign}0x{lead}p{exp_sign}{}", exp.abs())
    } else {
        format!("{sign}0x{lead}.{digits}p{exp_sign}{}", exp.abs())
    }
}

/// `x * 2^e` without intermediate overflow/underflow for in-range results.
fn ldexp(mut x: f64, mut e: i32) -> f64 {
    let pow2 = |k: i32| f64::from_bits(((k + EXP_BIAS) as u64) << MANTISSA_BITS);
    while e > 1000 {
        x *= pow2(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= pow2(-1000);
        e += 1000;
    }
    x * pow2(e)
}

pub fn parse(text: &str) -> Option<f64> {
    let (negative, body) = match text.as_bytes().first()? {
        b'-' => (true, &text[1..]),
        b'+' => (false, &text[1..]),
        _ => (false, text),
    };
    let signed = |v: f64| if negative { -v } else { v };
    match body {
        "inf" => return Some(signed(f64::INFINITY)),
        "nan" => return Some(f64::NAN),
        _ => {}
    }
    let body = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X"))?;
    let (mantissa_text, exp_text) = body.split_once(['p', 'P'])?;
    let exp: i32 = exp_text.parse().ok()?;
    let (int_part, frac_part) = mantissa_text.split_once('.').unwrap_or((mantissa_text, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    // Exactness only holds for mantissas of at most 53 significant bits,
    // which covers everything `format` produces.
    let mut mantissa: u64 = 0;
    for ch in int_part.chars().chain(frac_part.chars()) {
        let d = ch.to_digit(16)? as u64;
        mantissa = mantissa.checked_mul(16)?.checked_add(d)?;
    }
    if mantissa >> 53 != 0 {
        return None;
    }
    let shift = exp.checked_sub(4 * frac_part.len() as i32)?;
    Some(signed(ldexp(mantissa as f64, shift)))
}
