//! Human-friendly sizes (`4MiB`) and rates (`100/s`).

pub fn parse_size(s: &str) -> Result<usize, String> {
    let t = s.trim();
    let split = t.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let value: f64 = num.parse().map_err(|_| format!("bad size {s:?}"))?;
    let scale = match unit.trim() {
        "" | "B" => 1.0,
        "k" | "K" | "KB" | "kB" => 1e3,
        "M" | "MB" => 1e6,
        "G" | "GB" => 1e9,
        "KiB" => 1024.0,
        "MiB" => 1024.0 * 1024.0,
        "GiB" => 1024.0 * 1024.0 * 1024.0,
        other => return Err(format!("unknown size unit {other:?} in {s:?}")),
    };
    let bytes = value * scale;
    if !bytes.is_finite() || bytes < 0.0 || bytes > u32::MAX as f64 {
        return Err(format!("size {s:?} out of range"));
    }
    Ok(bytes.round() as usize)
}

/// Frames per second; `None` means unpaced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate(pub Option<f64>);

impl std::str::FromStr for Rate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if matches!(t, "max" | "unlimited" | "0" | "0/s") {
            return Ok(Rate(None));
        }
        let num = t.strip_suffix("/s").unwrap_or(t);
        let v: f64 = num.parse().map_err(|_| format!("bad rate {s:?}, expected e.g. 100/s"))?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(format!("bad rate {s:?}"));
        }
        Ok(Rate(Some(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4MiB"), Ok(4 << 20));
        assert_eq!(parse_size("64KiB"), Ok(65536));
        assert_eq!(parse_size("1000"), Ok(1000));
        assert_eq!(parse_size("1.5MB"), Ok(1_500_000));
        assert!(parse_size("4 furlongs").is_err());
        assert!(parse_size("").is_err());
    }

    #[test]
    fn rates() {
        assert_eq!("100/s".parse::<Rate>(), Ok(Rate(Some(100.0))));
        assert_eq!("2.5".parse::<Rate>(), Ok(Rate(Some(2.5))));
        assert_eq!("max".parse::<Rate>(), Ok(Rate(None)));
        assert!("-1/s".parse::<Rate>().is_err());
        assert!("fast".parse::<Rate>().is_err());
    }
}
