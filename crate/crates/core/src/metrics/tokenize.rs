use std::collections::HashSet;
use std::sync::OnceLock;

use super::TokenSequence;

/// Version tag of the punctuation table compiled into this build.
pub const TOKENIZER_VERSION: &str = "punct-v1";

const PUNCT_TABLE: &str = include_str!("../../data/punct_v1.txt");

fn punct_table() -> &'static HashSet<char> {
    static TABLE: OnceLock<HashSet<char>> = OnceLock::new();
    TABLE.get_or_init(|| parse_table(PUNCT_TABLE))
}

fn parse_table(src: &str) -> HashSet<char> {
    src.lines()
        .filter_map(|line| {
            let entry = line.split('#').next().unwrap_or("").trim();
            let hex = entry.strip_prefix("U+")?;
            let cp = u32::from_str_radix(hex, 16).expect("malformed punctuation table entry");
            Some(char::from_u32(cp).expect("punctuation table entry is not a scalar value"))
        })
        .collect()
}

pub fn is_separated_punct(c: char) -> bool {
    punct_table().contains(&c)
}

/// Split on Unicode whitespace, then give every character from the
/// punctuation table its own token. `.` and `,` between two ASCII digits
/// stay inside the number.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut cur = String::new();
        for (i, &ch) in chars.iter().enumerate() {
            if !is_separated_punct(ch) {
                cur.push(ch);
                continue;
            }
            let numeric_sep = matches!(ch, '.' | ',')
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_ascii_digit()
                && chars[i + 1].is_ascii_digit();
            if numeric_sep {
                cur.push(ch);
                continue;
            }
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    TokenSequence::new(out)
}
