//! Deterministic number formatting for CSV and model files.

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x == f64::INFINITY {
        "inf".to_string()
    } else if x == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{x:.16e}")
    }
}

pub fn parse_f64(s: &str) -> Option<f64> {
    match s {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn special_values() {
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(0.25), "2.5000000000000000e-1");
        assert_eq!(parse_f64("inf"), Some(f64::INFINITY));
    }

    proptest! {
        #[test]
        fn round_trips_bit_exact(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
            let s = fmt_f64(x);
            let y = parse_f64(&s).unwrap();
            prop_assert_eq!(x.to_bits(), y.to_bits());
            prop_assert_eq!(fmt_f64(y), s);
        }
    }
}
