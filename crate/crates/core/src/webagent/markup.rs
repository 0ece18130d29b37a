//! Deterministic HTML-to-text extraction: tags removed, block elements
//! become newlines, script/style/comment content dropped, the common
//! entities decoded.

const BLOCK_TAGS: &[&str] = &[
    "address", "article", "aside", "blockquote", "br", "dd", "div", "dl", "dt", "footer", "h1", "h2",
    "h3", "h4", "h5", "h6", "header", "hr", "li", "main", "nav", "ol", "p", "pre", "section", "table",
    "td", "th", "title", "tr", "ul",
];

fn decode_entity(entity: &str) -> Option<char> {
    match entity {
        "amp" => Some('&'),
        "lt" => Some('<'),
        "gt" => Some('>'),
        "quot" => Some('"'),
        "apos" | "#39" => Some('\''),
        "nbsp" => Some(' '),
        _ => {
            let num = entity.strip_prefix('#')?;
            let code = match num.strip_prefix(['x', 'X']) {
                Some(hex) => u32::from_str_radix(hex, 16).ok()?,
                None => num.parse().ok()?,
            };
            char::from_u32(code)
        }
    }
}

fn decode_entities(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let after = &rest[amp + 1..];
        let decoded = after
            .find(';')
            .filter(|&semi| semi <= 10)
            .and_then(|semi| decode_entity(&after[..semi]).map(|c| (c, semi)));
        match decoded {
            Some((c, semi)) => {
                out.push(c);
                rest = &after[semi + 1..];
            }
            None => {
                out.push('&');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn tag_name(tag: &str) -> String {
    tag.trim_start_matches('/')
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase()
}

/// Converts markup to plain text. Input without tags passes through apart
/// from entity decoding.
pub fn html_to_text(html: &str) -> String {
    let mut out = String::with_capacity(html.len());
    let mut text_start = 0;
    let mut saw_tag = false;
    let mut i = 0;
    let bytes = html.as_bytes();
    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        let next = bytes.get(i + 1).copied().unwrap_or(b' ');
        if !(next.is_ascii_alphabetic() || next == b'/' || next == b'!') {
            i += 1;
            continue;
        }
        out.push_str(&decode_entities(&html[text_start..i]));
        saw_tag = true;
        if html[i..].starts_with("<!--") {
            i = html[i..].find("-->").map_or(html.len(), |e| i + e + 3);
            text_start = i;
            continue;
        }
        let Some(close) = html[i..].find('>') else {
            text_start = i;
            break;
        };
        let tag = &html[i + 1..i + close];
        let name = tag_name(tag);
        i += close + 1;
        if (name == "script" || name == "style") && !tag.starts_with('/') {
            let end_marker = format!("</{name}");
            let lower = html[i..].to_ascii_lowercase();
            i = match lower.find(&end_marker) {
                Some(e) => html[i + e..].find('>').map_or(html.len(), |g| i + e + g + 1),
                None => html.len(),
            };
        } else if BLOCK_TAGS.contains(&name.as_str()) && !out.ends_with('\n') && !out.is_empty() {
            out.push('\n');
        }
        text_start = i;
    }
    if text_start < html.len() {
        out.push_str(&decode_entities(&html[text_start..]));
    }
    if saw_tag {
        out.truncate(out.trim_end().len());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_tags_and_scripts() {
        let html = "<html><head><title>T</title><style>p{x:1}</style><script>var a = '<p>';</script></head>\
<body><p>Hello <b>world</b></p><div>a &amp; b &lt;c&gt; &#65;&#x42;</div><!-- hidden --></body></html>";
        assert_eq!(html_to_text(html), "T\nHello world\na & b <c> AB");
    }

    #[test]
    fn plain_text_passes_through() {
        let text = "pip install youtube-transcript-api\nif a < b then\n";
        assert_eq!(html_to_text(text), text);
    }

    #[test]
    fn unterminated_entity_is_literal() {
        assert_eq!(html_to_text("AT&T rocks & rolls"), "AT&T rocks & rolls");
    }
}
