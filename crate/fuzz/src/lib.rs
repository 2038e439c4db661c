//! Input framing shared by the two-part fuzz targets.

/// Splits `[len: u16 le][text: len bytes][payload]` into text and payload.
///
/// Inputs too short for the header, or whose text is not UTF-8, are skipped.
pub fn split_framed(data: &[u8]) -> Option<(&str, &[u8])> {
    let (header, rest) = data.split_first_chunk::<2>()?;
    let len = u16::from_le_bytes(*header) as usize;
    if rest.len() < len {
        return None;
    }
    let (text, payload) = rest.split_at(len);
    Some((std::str::from_utf8(text).ok()?, payload))
}

/// Inverse of [`split_framed`], used to build corpus seeds.
pub fn frame(text: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = (text.len() as u16).to_le_bytes().to_vec();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(payload);
    out
}
