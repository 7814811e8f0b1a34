//! Canonical JSON rendering: object keys sorted, stable formatting, one
//! trailing newline — so golden-file comparisons are byte-reproducible.

use serde::Serialize;

use crate::error::Result;

/// Serialize any value to canonical pretty JSON. Routing through
/// `serde_json::Value` sorts object keys (its map is BTree-backed).
pub fn to_canonical_string<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Serialize;

    #[derive(Serialize)]
    struct Demo {
        zulu: u32,
        alpha: u32,
        mike: Vec<u32>,
    }

    #[test]
    fn keys_are_sorted_and_output_is_stable() {
        let d = Demo { zulu: 1, alpha: 2, mike: vec![3, 4] };
        let a = to_canonical_string(&d).unwrap();
        let b = to_canonical_string(&d).unwrap();
        assert_eq!(a, b);
        let za = a.find("\"zulu\"").unwrap();
        let al = a.find("\"alpha\"").unwrap();
        assert!(al < za, "keys must be sorted:\n{a}");
        assert!(a.ends_with('\n'));
    }
}
