//! Parsers for the small value grammars used on the command line.

use crate::error::{Error, Result};

/// `"WxH"` with positive integers.
pub fn parse_size(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("expected WIDTHxHEIGHT, got {text:?}"));
    let (w, h) = text.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    let parse = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0 && v <= 1 << 15);
    Ok((parse(w).ok_or_else(bad)?, parse(h).ok_or_else(bad)?))
}

/// Comma-separated, non-empty, distinct view names.
pub fn parse_views(text: &str) -> Result<Vec<String>> {
    let names: Vec<String> = text.split(',').map(|s| s.trim().to_string()).collect();
    if names.iter().any(|n| n.is_empty()) {
        return Err(Error::Config(format!("empty view name in {text:?}")));
    }
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::Config(format!("view {n:?} listed twice")));
        }
    }
    Ok(names)
}

/// `"#rrggbb"` to RGB in `[0, 1]`.
pub fn parse_color(text: &str) -> Result<[f64; 3]> {
    let bad = || Error::Config(format!("expected a color like #rrggbb, got {text:?}"));
    let hex = text.trim().strip_prefix('#').ok_or_else(bad)?;
    if hex.len() != 6 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(bad());
    }
    let mut out = [0.0; 3];
    for (c, v) in out.iter_mut().enumerate() {
        let byte = u8::from_str_radix(&hex[2 * c..2 * c + 2], 16).map_err(|_| bad())?;
        *v = byte as f64 / 255.0;
    }
    Ok(out)
}

/// `"LO,HI"` inclusive range of positive integers.
pub fn parse_range(text: &str) -> Result<[usize; 2]> {
    let bad = || Error::Config(format!("expected LO,HI, got {text:?}"));
    let (a, b) = text.split_once(',').ok_or_else(bad)?;
    let lo = a.trim().parse::<usize>().map_err(|_| bad())?;
    let hi = b.trim().parse::<usize>().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok([lo, hi])
}

/// Comma-separated positive integers.
pub fn parse_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config(format!("expected positive integers, got {text:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("64x48").unwrap(), (64, 48));
        assert_eq!(parse_size("8X8").unwrap(), (8, 8));
        for bad in ["64", "0x4", "x4", "4x", "-1x4", "4x4x4", "axb", ""] {
            assert!(parse_size(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn views() {
        assert_eq!(parse_views("c00,c02, c20,c22").unwrap(), ["c00", "c02", "c20", "c22"]);
        assert!(parse_views("c00,,c01").is_err());
        assert!(parse_views("c00,c00").is_err());
        assert!(parse_views("").is_err());
    }

    #[test]
    fn colors() {
        assert_eq!(parse_color("#000000").unwrap(), [0.0; 3]);
        assert_eq!(parse_color("#ffffff").unwrap(), [1.0; 3]);
        assert_eq!(parse_color("#FF8000").unwrap(), [1.0, 128.0 / 255.0, 0.0]);
        for bad in ["ffffff", "#fff", "#gg0000", "#ff00001", "#é0000", "#+f+f+f"] {
            assert!(parse_color(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn ranges_and_lists() {
        assert_eq!(parse_range("2,5").unwrap(), [2, 5]);
        assert!(parse_range("5,2").is_err());
        assert_eq!(parse_list("1,2,3,4").unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_list("1,0").is_err());
    }
}
