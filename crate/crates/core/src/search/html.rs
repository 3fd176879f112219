//! Rule-based HTML body reduction: strip markup, drop script/style/nav
//! and comments, turn block boundaries into newlines, decode entities and
//! collapse whitespace. No DOM, one pass.

/// Elements whose entire content is dropped.
const DROP_CONTENT: [&str; 7] = ["script", "style", "noscript", "nav", "head", "template", "svg"];

/// Elements whose boundaries become line breaks.
const BLOCK: [&str; 22] = [
    "p", "div", "br", "li", "ul", "ol", "h1", "h2", "h3", "h4", "h5", "h6", "tr", "table", "td",
    "th", "section", "article", "header", "footer", "blockquote", "pre",
];

/// Reduce decoded HTML to plain body text. Total: worst case the result
/// is empty.
pub fn extract_body(html: &str) -> String {
    let mut out = String::with_capacity(html.len() / 2);
    let bytes = html.as_bytes();
    let mut i = 0usize;
    let mut drop_until: Option<String> = None;

    while i < bytes.len() {
        let c = bytes[i];
        if c == b'<' {
            // Comment?
            if html[i..].starts_with("<!--") {
                match html[i + 4..].find("-->") {
                    Some(end) => {
                        i += 4 + end + 3;
                        continue;
                    }
                    None => break,
                }
            }
            // A tag only if followed by a letter, '/' or '!'.
            let next = bytes.get(i + 1).copied();
            let is_tag = matches!(next, Some(b'/') | Some(b'!'))
                || next.map(|b| b.is_ascii_alphabetic()).unwrap_or(false);
            if !is_tag {
                if drop_until.is_none() {
                    out.push('<');
                }
                i += 1;
                continue;
            }
            let rest = &html[i..];
            let close = match rest.find('>') {
                Some(p) => p,
                None => break, // truncated tag at EOF
            };
            let tag_body = &rest[1..close];
            let closing = tag_body.starts_with('/');
            let name: String = tag_body
                .trim_start_matches('/')
                .chars()
                .take_while(|ch| ch.is_ascii_alphanumeric())
                .collect::<String>()
                .to_ascii_lowercase();

            if let Some(ref until) = drop_until {
                if closing && &name == until {
                    drop_until = None;
                }
                i += close + 1;
                continue;
            }
            if !closing && DROP_CONTENT.contains(&name.as_str()) && !tag_body.ends_with('/') {
                drop_until = Some(name.clone());
                i += close + 1;
                continue;
            }
            if BLOCK.contains(&name.as_str()) {
                out.push('\n');
            }
            i += close + 1;
        } else if drop_until.is_some() {
            i += 1;
        } else if c == b'&' {
            let (decoded, used) = decode_entity(&html[i..]);
            out.push_str(&decoded);
            i += used;
        } else {
            // Copy one char (not byte).
            let ch = html[i..].chars().next().unwrap();
            out.push(ch);
            i += ch.len_utf8();
        }
    }

    collapse(&out)
}

/// Decode one entity at the start of `s`; returns (text, bytes consumed).
fn decode_entity(s: &str) -> (String, usize) {
    debug_assert!(s.starts_with('&'));
    let end = s[..s.len().min(12)].find(';');
    let Some(end) = end else {
        return ("&".to_string(), 1);
    };
    let name = &s[1..end];
    let decoded = match name {
        "amp" => Some("&".to_string()),
        "lt" => Some("<".to_string()),
        "gt" => Some(">".to_string()),
        "quot" => Some("\"".to_string()),
        "apos" | "#39" => Some("'".to_string()),
        "nbsp" => Some(" ".to_string()),
        _ => {
            if let Some(num) = name.strip_prefix("#x").or_else(|| name.strip_prefix("#X")) {
                u32::from_str_radix(num, 16).ok().and_then(char::from_u32).map(String::from)
            } else if let Some(num) = name.strip_prefix('#') {
                num.parse::<u32>().ok().and_then(char::from_u32).map(String::from)
            } else {
                None
            }
        }
    };
    match decoded {
        Some(d) => (d, end + 1),
        None => ("&".to_string(), 1),
    }
}

/// Collapse runs of spaces/tabs to one space and runs of newlines to one
/// newline; trim each line and the whole text. Idempotent.
fn collapse(text: &str) -> String {
    let mut lines: Vec<String> = Vec::new();
    for raw_line in text.split('\n') {
        let mut line = String::with_capacity(raw_line.len());
        let mut in_ws = false;
        for ch in raw_line.chars() {
            if ch.is_whitespace() {
                in_ws = true;
            } else {
                if in_ws && !line.is_empty() {
                    line.push(' ');
                }
                in_ws = false;
                line.push(ch);
            }
        }
        if !line.is_empty() {
            lines.push(line);
        }
    }
    lines.join("\n")
}
