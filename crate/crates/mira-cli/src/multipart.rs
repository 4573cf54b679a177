//! Minimal multipart/form-data parsing for the query endpoint: boundary
//! extraction from the Content-Type header, part splitting, and
//! Content-Disposition name/filename fields. Enough for text fields and
//! one binary file part; not a general MIME implementation.

use anyhow::{anyhow, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub name: String,
    pub filename: Option<String>,
    pub data: Vec<u8>,
}

/// Pull the boundary token out of a multipart/form-data content type.
pub fn boundary_from_content_type(content_type: &str) -> Result<String> {
    let lower = content_type.to_ascii_lowercase();
    if !lower.starts_with("multipart/form-data") {
        return Err(anyhow!(
            "expected multipart/form-data, got {content_type:?}"
        ));
    }
    for param in content_type.split(';').map(str::trim) {
        if let Some(value) = param.strip_prefix("boundary=") {
            let value = value.trim_matches('"');
            if value.is_empty() {
                return Err(anyhow!("empty multipart boundary"));
            }
            return Ok(value.to_string());
        }
    }
    Err(anyhow!("missing multipart boundary in {content_type:?}"))
}

fn find(haystack: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if needle.is_empty() || haystack.len() < from + needle.len() {
        return None;
    }
    haystack[from..]
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + from)
}

fn disposition_param(header: &str, key: &str) -> Option<String> {
    for piece in header.split(';').map(str::trim) {
        if let Some(v) = piece.strip_prefix(&format!("{key}=")) {
            return Some(v.trim_matches('"').to_string());
        }
    }
    None
}

/// Split a multipart body into its parts.
pub fn parse_multipart(body: &[u8], boundary: &str) -> Result<Vec<Part>> {
    let delim = format!("--{boundary}");
    let delim_bytes = delim.as_bytes();
    let mut parts = Vec::new();
    let mut pos =
        find(body, delim_bytes, 0).ok_or_else(|| anyhow!("boundary not found in body"))?;
    loop {
        pos += delim_bytes.len();
        if body[pos..].starts_with(b"--") {
            break; // closing delimiter
        }
        // Skip the CRLF (or LF) after the boundary line.
        if body[pos..].starts_with(b"\r\n") {
            pos += 2;
        } else if body[pos..].starts_with(b"\n") {
            pos += 1;
        }
        let header_end = find(body, b"\r\n\r\n", pos)
            .map(|p| (p, 4))
            .or_else(|| find(body, b"\n\n", pos).map(|p| (p, 2)))
            .ok_or_else(|| anyhow!("part headers not terminated"))?;
        let headers = std::str::from_utf8(&body[pos..header_end.0])
            .map_err(|_| anyhow!("part headers not UTF-8"))?;
        let mut name = None;
        let mut filename = None;
        for line in headers.lines() {
            if line
                .to_ascii_lowercase()
                .starts_with("content-disposition:")
            {
                name = disposition_param(line, "name");
                filename = disposition_param(line, "filename");
            }
        }
        let data_start = header_end.0 + header_end.1;
        let next =
            find(body, delim_bytes, data_start).ok_or_else(|| anyhow!("unterminated part"))?;
        // Strip the trailing CRLF that precedes the next boundary.
        let mut data_end = next;
        if data_end >= 2 && &body[data_end - 2..data_end] == b"\r\n" {
            data_end -= 2;
        } else if data_end >= 1 && body[data_end - 1] == b'\n' {
            data_end -= 1;
        }
        parts.push(Part {
            name: name.ok_or_else(|| anyhow!("part missing name"))?,
            filename,
            data: body[data_start..data_end].to_vec(),
        });
        pos = next;
    }
    Ok(parts)
}

/// Encode parts as multipart/form-data, for tests.
#[cfg(test)]
pub fn encode_multipart(parts: &[Part], boundary: &str) -> Vec<u8> {
    let mut out = Vec::new();
    for part in parts {
        out.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        match &part.filename {
            Some(f) => out.extend_from_slice(
                format!(
                    "Content-Disposition: form-data; name=\"{}\"; filename=\"{}\"\r\n\r\n",
                    part.name, f
                )
                .as_bytes(),
            ),
            None => out.extend_from_slice(
                format!(
                    "Content-Disposition: form-data; name=\"{}\"\r\n\r\n",
                    part.name
                )
                .as_bytes(),
            ),
        }
        out.extend_from_slice(&part.data);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_extraction() {
        assert_eq!(
            boundary_from_content_type("multipart/form-data; boundary=XyZ123").unwrap(),
            "XyZ123"
        );
        assert_eq!(
            boundary_from_content_type("multipart/form-data; boundary=\"quoted\"").unwrap(),
            "quoted"
        );
        assert!(boundary_from_content_type("application/json").is_err());
        assert!(boundary_from_content_type("multipart/form-data").is_err());
    }

    #[test]
    fn encode_parse_round_trip() {
        let parts = vec![
            Part {
                name: "text".into(),
                filename: None,
                data: b"is it malignant?".to_vec(),
            },
            Part {
                name: "image".into(),
                filename: Some("scan.png".into()),
                data: vec![0, 1, 2, 255, 13, 10, 45, 45],
            },
        ];
        let body = encode_multipart(&parts, "BOUNDARY42");
        let back = parse_multipart(&body, "BOUNDARY42").unwrap();
        assert_eq!(back, parts);
    }

    #[test]
    fn tolerates_bare_lf_headers() {
        let body = b"--B\nContent-Disposition: form-data; name=\"text\"\n\nhello\n--B--\n";
        let parts = parse_multipart(body, "B").unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].data, b"hello");
    }

    #[test]
    fn missing_name_is_error() {
        let body = b"--B\r\nContent-Disposition: form-data\r\n\r\nx\r\n--B--\r\n";
        assert!(parse_multipart(body, "B").is_err());
    }
}
