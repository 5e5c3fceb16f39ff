//! Decimal output with 9 significant digits.
//!
//! Numbers are rounded half-to-even on their exact binary value and printed
//! in the style of C's `%.9g`: fixed notation for decimal exponents in
//! `[-4, 9)`, scientific otherwise, trailing zeros removed.

/// Significant digits of every emitted float.
pub const SIG_DIGITS: usize = 9;

/// Formats `x` with [`SIG_DIGITS`] significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", SIG_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let sign = if negative { "-" } else { "" };

    if (-4..SIG_DIGITS as i32).contains(&exp) {
        let body = if exp >= 0 {
            let split = exp as usize + 1;
            format!("{}.{}", &digits[..split], &digits[split..])
        } else {
            format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
        };
        format!("{sign}{}", trim_fraction(&body))
    } else {
        let mantissa = format!("{}.{}", &digits[..1], &digits[1..]);
        let body = trim_fraction(&mantissa);
        let esign = if exp < 0 { '-' } else { '+' };
        format!("{sign}{body}e{esign}{:02}", exp.abs())
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `x` rounded to [`SIG_DIGITS`] significant digits, as the nearest double.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    fmt_sig(x).parse().expect("formatted float parses")
}
