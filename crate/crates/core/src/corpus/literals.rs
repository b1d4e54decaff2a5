use std::sync::LazyLock;

use regex::Regex;

pub const NUM: &str = "<Num>";
pub const STR: &str = "<Str>";

// Integer (decimal, hex, octal, binary) and floating literals with C suffixes,
// plus character constants, which C types as int.
static NUMERIC: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(?x)^(
            0[xX][0-9a-fA-F']+(\.[0-9a-fA-F]*)?([pP][+-]?[0-9]+)?[uUlL]*(i64|i32|i16|i8)?
          | 0[bB][01']+[uUlL]*
          | ([0-9][0-9']*\.?[0-9']*|\.[0-9][0-9']*)([eE][+-]?[0-9]+)?[uUlLfFiI]*(64|32|16|8)?
          | [LuU]?'([^'\\]|\\.)+'
        )$"#,
    )
    .unwrap()
});

static STRING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"^(L|u8|u|U)?"([^"\\]|\\.)*"$"#).unwrap());

pub fn is_numeric_literal(tok: &str) -> bool {
    NUMERIC.is_match(tok)
}

pub fn is_string_literal(tok: &str) -> bool {
    STRING.is_match(tok)
}

/// Replaces numeric literals by `<Num>` and string literals by `<Str>`.
pub fn normalize_literals<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            let t = t.as_ref();
            if is_string_literal(t) {
                STR.to_string()
            } else if is_numeric_literal(t) {
                NUM.to_string()
            } else {
                t.to_string()
            }
        })
        .collect()
}
