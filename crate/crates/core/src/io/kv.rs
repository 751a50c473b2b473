//! Flat `key=value` text: one pair per line, `#` starts a comment, blank
//! lines are ignored, keys and values are trimmed, duplicate keys are errors.

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {:?}",
                lineno + 1,
                raw
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("duplicate key {k:?}")));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks() {
        let kv = parse_kv("# header\n\nbits_w = 4 # weights\nbits_a=8\n").unwrap();
        assert_eq!(
            kv,
            vec![
                ("bits_w".to_string(), "4".to_string()),
                ("bits_a".to_string(), "8".to_string())
            ]
        );
    }

    #[test]
    fn malformed_and_duplicates() {
        assert!(parse_kv("bits_w 4").is_err());
        assert!(parse_kv("=4").is_err());
        assert!(parse_kv("a=1\na=2").is_err());
    }
}
