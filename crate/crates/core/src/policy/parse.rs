//! Response parsing: tagged sections, fenced code blocks, integers.

/// Contents of every `[tag]...[/tag]` block, in order. Tags match
/// ASCII-case-insensitively; text outside blocks is ignored, as are
/// unterminated and empty blocks.
pub fn extract_tagged(text: &str, tag: &str) -> Vec<String> {
    let lower = text.to_ascii_lowercase();
    let open = format!("[{}]", tag.to_ascii_lowercase());
    let close = format!("[/{}]", tag.to_ascii_lowercase());
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(rel) = lower[pos..].find(&open) {
        let start = pos + rel + open.len();
        let Some(end_rel) = lower[start..].find(&close) else {
            break;
        };
        let end = start + end_rel;
        let body = text[start..end].trim();
        if !body.is_empty() {
            out.push(body.to_string());
        }
        pos = end + close.len();
    }
    out
}

/// Body of the first fenced code block. The language tag after the opening
/// fence is optional; an unterminated block runs to the end of the text.
pub fn extract_code_block(text: &str) -> Option<String> {
    let fence = text.find("```")?;
    let after = &text[fence + 3..];
    let first_line = &after[..after.find('\n').unwrap_or(after.len())];
    if let Some(close) = first_line.find("```") {
        // Single-line block: ```code```
        return Some(first_line[..close].trim().to_string());
    }
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = if body.starts_with("```") {
        0
    } else {
        body.find("\n```").map_or(body.len(), |i| i + 1)
    };
    let code = body[..end].trim_end_matches(['\n', '\r']);
    Some(code.to_string())
}

/// First run of ASCII digits in the text.
pub fn first_integer(text: &str) -> Option<u64> {
    let start = text.find(|c: char| c.is_ascii_digit())?;
    let digits: String = text[start..]
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    // Overlong digit runs saturate rather than fail.
    Some(digits.parse().unwrap_or(u64::MAX))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tagged_blocks_in_order() {
        let text = "intro [OBSERVATION] one [/OBSERVATION] noise\n[observation]\ntwo\n[/observation]";
        assert_eq!(extract_tagged(text, "OBSERVATION"), vec!["one", "two"]);
    }

    #[test]
    fn unterminated_and_empty_blocks_dropped() {
        let text = "[direction][/direction][direction] a [/direction][direction] dangling";
        assert_eq!(extract_tagged(text, "direction"), vec!["a"]);
    }

    #[test]
    fn code_block_variants() {
        assert_eq!(extract_code_block("```python\nprint(1)\n```").unwrap(), "print(1)");
        assert_eq!(
            extract_code_block("Here is the fix:\n```\na = 1\nb = 2\n```\nDone.").unwrap(),
            "a = 1\nb = 2"
        );
        assert_eq!(
            extract_code_block("```py\nfirst()\n```\ntext\n```py\nsecond()\n```").unwrap(),
            "first()"
        );
        assert_eq!(extract_code_block("```print(3)```").unwrap(), "print(3)");
        assert_eq!(extract_code_block("```\nx = 1\n").unwrap(), "x = 1");
        assert!(extract_code_block("no code here").is_none());
    }

    #[test]
    fn integers() {
        assert_eq!(first_integer("Score: 85"), Some(85));
        assert_eq!(first_integer("0"), Some(0));
        assert_eq!(first_integer("none"), None);
        assert_eq!(first_integer("99999999999999999999999"), Some(u64::MAX));
    }

    proptest! {
        #[test]
        fn tagged_parse_is_order_preserving(
            bodies in prop::collection::vec("[a-z0-9 ]{0,12}[a-z0-9]", 0..6),
            noise in prop::collection::vec("[a-zA-Z0-9 .,\n]{0,20}", 7),
        ) {
            let mut text = noise[0].clone();
            for (i, b) in bodies.iter().enumerate() {
                text.push_str("[direction]");
                text.push_str(b);
                text.push_str("[/direction]");
                text.push_str(&noise[i + 1]);
            }
            let expected: Vec<String> = bodies.iter().map(|b| b.trim().to_string()).collect();
            prop_assert_eq!(extract_tagged(&text, "direction"), expected);
        }
    }
}
