//! Numeric formatting for the CSV outputs: six significant digits,
//! stable across runs and platforms.

/// Formats with six significant digits, plain decimal where reasonable
/// and scientific notation for extreme magnitudes.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-4..15).contains(&exp) {
        return trim(&format!("{x:.5e}"));
    }
    let decimals = (5 - exp).max(0) as usize;
    trim(&format!("{x:.decimals$}"))
}

/// Drops trailing fraction zeros ("1.250000" -> "1.25", "3.000000" -> "3"),
/// leaving exponents intact.
fn trim(s: &str) -> String {
    let (mantissa, exp) = match s.split_once('e') {
        Some((m, e)) => (m, Some(e)),
        None => (s, None),
    };
    let m = if mantissa.contains('.') {
        mantissa.trim_end_matches('0').trim_end_matches('.')
    } else {
        mantissa
    };
    match exp {
        Some(e) => format!("{m}e{e}"),
        None => m.to_string(),
    }
}

pub fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Optional value: empty field when absent.
pub fn opt(x: Option<f64>) -> String {
    x.map(sig6).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(-1.25), "-1.25");
        assert_eq!(sig6(123.456789), "123.457");
        assert_eq!(sig6(0.001234567), "0.00123457");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(1.23456789e-7), "1.23457e-7");
        assert_eq!(sig6(9.87654321e18), "9.87654e18");
        assert_eq!(sig6(f64::NAN), "nan");
    }

    #[test]
    fn formatting_is_deterministic() {
        for &x in &[std::f64::consts::PI, 1.0 / 3.0, -2.0f64.sqrt(), 1e-3, 123.0] {
            assert_eq!(sig6(x), sig6(x));
        }
    }
}
