/// Token emitted when a text produces no tokens at all.
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

/// Lowercases, splits on whitespace, and peels ASCII punctuation off both
/// ends of each chunk as one-character tokens.
///
/// ```
/// use sufisent::corpus::tokenize;
/// assert_eq!(tokenize("A man, smiling."), ["a", "man", ",", "smiling", "."]);
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = chunk.to_lowercase();
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && chars[start].is_ascii_punctuation() {
            start += 1;
        }
        while end > start && chars[end - 1].is_ascii_punctuation() {
            end -= 1;
        }
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    if out.is_empty() {
        out.push(UNK_TOKEN.to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(tokenize("A man, smiling."), ["a", "man", ",", "smiling", "."]);
        assert_eq!(tokenize("Hello"), ["hello"]);
        assert_eq!(tokenize("   "), [UNK_TOKEN]);
        assert_eq!(tokenize("\"Wait...\""), ["\"", "wait", ".", ".", ".", "\""]);
        assert_eq!(tokenize("don't  stop"), ["don't", "stop"]);
        assert_eq!(tokenize("--"), ["-", "-"]);
    }

    #[test]
    fn golden_fixture() {
        let sentences = include_str!("../../tests/fixtures/sentences.txt");
        let golden = include_str!("../../tests/fixtures/sentences.tokens");
        let got: Vec<String> = sentences.lines().map(|s| tokenize(s).join(" ")).collect();
        let want: Vec<&str> = golden.lines().collect();
        assert_eq!(got, want);
    }
}
