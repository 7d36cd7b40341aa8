//! Number formatting shared by the CSV writers.

/// Formats `x` with exactly 17 significant digits in scientific notation.
///
/// Seventeen digits are enough for every `f64` to round-trip through text.
pub fn sig17(x: f64) -> String {
    if x.is_nan() {
        return "NaN".to_string();
    }
    format!("{:.16e}", x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for x in [
            0.0,
            0.5,
            1.0 / 3.0,
            -2.828_427_124_746_19,
            1e-300,
            123456789.0,
        ] {
            let s = sig17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17);
        }
    }
}
