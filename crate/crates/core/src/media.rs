//! Minimal well-formed placeholder media.
//!
//! Each placeholder carries a short text descriptor so that downstream
//! consumers (transcription, stub scoring) can recover what the file is
//! "about" without any model: a `tEXt` chunk in PNG, a `TXXX` frame in an
//! ID3v2 tag for MP3, a `free` box for MP4, and the text itself for TXT.

use crate::modality::Extension;

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";
const PNG_KEYWORD: &[u8] = b"Description";
const MP4_TAG: &[u8] = b"mpe-desc:";
const ID3_DESCRIPTION: &[u8] = b"mpe";
// MPEG-1 Layer III, 128 kbit/s, 44.1 kHz, no padding: 417-byte frames.
const MP3_FRAME_HEADER: [u8; 4] = [0xFF, 0xFB, 0x90, 0x64];
const MP3_FRAME_LEN: usize = 417;

pub fn placeholder(extension: Extension, descriptor: &str) -> Vec<u8> {
    match extension {
        Extension::Png => png(descriptor),
        Extension::Mp3 => mp3(descriptor),
        Extension::Mp4 => mp4(descriptor),
        Extension::Txt => descriptor.as_bytes().to_vec(),
    }
}

/// Recovers the descriptor embedded by [`placeholder`], if any.
pub fn describe(extension: Extension, bytes: &[u8]) -> Option<String> {
    match extension {
        Extension::Png => describe_png(bytes),
        Extension::Mp3 => describe_mp3(bytes),
        Extension::Mp4 => describe_mp4(bytes),
        Extension::Txt => Some(String::from_utf8_lossy(bytes).into_owned()),
    }
}

/// Cheap structural check that `bytes` looks like a file of `extension`.
pub fn looks_valid(extension: Extension, bytes: &[u8]) -> bool {
    match extension {
        Extension::Png => bytes.starts_with(PNG_SIGNATURE) && bytes.ends_with(&png_chunk(b"IEND", &[])),
        Extension::Mp3 => {
            bytes.starts_with(b"ID3") || bytes.starts_with(&MP3_FRAME_HEADER[..2])
        }
        Extension::Mp4 => bytes.len() >= 8 && &bytes[4..8] == b"ftyp",
        Extension::Txt => std::str::from_utf8(bytes).is_ok(),
    }
}

/// Guesses the format of a file from its leading bytes. Anything that is
/// valid UTF-8 and matches no binary signature counts as text.
pub fn sniff(bytes: &[u8]) -> Option<Extension> {
    [Extension::Png, Extension::Mp4, Extension::Mp3, Extension::Txt]
        .into_iter()
        .find(|&ext| looks_valid(ext, bytes))
}

fn png_chunk(kind: &[u8; 4], data: &[u8]) -> Vec<u8> {
    let mut chunk = Vec::with_capacity(12 + data.len());
    chunk.extend_from_slice(&(data.len() as u32).to_be_bytes());
    chunk.extend_from_slice(kind);
    chunk.extend_from_slice(data);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(kind);
    hasher.update(data);
    chunk.extend_from_slice(&hasher.finalize().to_be_bytes());
    chunk
}

fn adler32(data: &[u8]) -> u32 {
    let (mut a, mut b) = (1u32, 0u32);
    for &byte in data {
        a = (a + byte as u32) % 65521;
        b = (b + a) % 65521;
    }
    (b << 16) | a
}

/// 1x1 RGBA image whose pixel colour is derived from the descriptor.
fn png(descriptor: &str) -> Vec<u8> {
    let seed = crate::digest::hash_parts(&[descriptor.as_bytes()]).to_le_bytes();
    let scanline = [0u8, seed[0], seed[1], seed[2], 0xFF];

    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&1u32.to_be_bytes());
    ihdr.extend_from_slice(&1u32.to_be_bytes());
    ihdr.extend_from_slice(&[8, 6, 0, 0, 0]);

    // zlib stream with a single stored deflate block.
    let mut idat = vec![0x78, 0x01, 0x01];
    idat.extend_from_slice(&(scanline.len() as u16).to_le_bytes());
    idat.extend_from_slice(&(!(scanline.len() as u16)).to_le_bytes());
    idat.extend_from_slice(&scanline);
    idat.extend_from_slice(&adler32(&scanline).to_be_bytes());

    let mut text = PNG_KEYWORD.to_vec();
    text.push(0);
    text.extend(descriptor.bytes().map(|b| if b.is_ascii() { b } else { b'?' }));

    let mut out = PNG_SIGNATURE.to_vec();
    out.extend(png_chunk(b"IHDR", &ihdr));
    out.extend(png_chunk(b"tEXt", &text));
    out.extend(png_chunk(b"IDAT", &idat));
    out.extend(png_chunk(b"IEND", &[]));
    out
}

fn describe_png(bytes: &[u8]) -> Option<String> {
    let mut rest = bytes.strip_prefix(PNG_SIGNATURE)?;
    while rest.len() >= 12 {
        let len = u32::from_be_bytes(rest[..4].try_into().ok()?) as usize;
        let kind = &rest[4..8];
        let data = rest.get(8..8 + len)?;
        if kind == b"tEXt" {
            if let Some(body) = data.strip_prefix(PNG_KEYWORD).and_then(|d| d.strip_prefix(b"\0")) {
                return Some(String::from_utf8_lossy(body).into_owned());
            }
        }
        rest = rest.get(12 + len..)?;
    }
    None
}

fn syncsafe(n: usize) -> [u8; 4] {
    [
        ((n >> 21) & 0x7F) as u8,
        ((n >> 14) & 0x7F) as u8,
        ((n >> 7) & 0x7F) as u8,
        (n & 0x7F) as u8,
    ]
}

fn unsyncsafe(b: &[u8]) -> usize {
    b.iter().fold(0usize, |acc, &x| (acc << 7) | (x & 0x7F) as usize)
}

/// ID3v2.3 tag with one TXXX frame, followed by one silent MPEG frame.
fn mp3(descriptor: &str) -> Vec<u8> {
    let mut frame_body = vec![0u8]; // ISO-8859-1
    frame_body.extend_from_slice(ID3_DESCRIPTION);
    frame_body.push(0);
    frame_body.extend_from_slice(descriptor.as_bytes());

    let mut frames = b"TXXX".to_vec();
    frames.extend_from_slice(&(frame_body.len() as u32).to_be_bytes());
    frames.extend_from_slice(&[0, 0]);
    frames.extend_from_slice(&frame_body);

    let mut out = b"ID3\x03\x00\x00".to_vec();
    out.extend_from_slice(&syncsafe(frames.len()));
    out.extend_from_slice(&frames);
    out.extend_from_slice(&MP3_FRAME_HEADER);
    out.resize(out.len() + MP3_FRAME_LEN - MP3_FRAME_HEADER.len(), 0);
    out
}

fn describe_mp3(bytes: &[u8]) -> Option<String> {
    if !bytes.starts_with(b"ID3") || bytes.len() < 10 {
        return None;
    }
    let tag_len = unsyncsafe(&bytes[6..10]);
    let mut frames = bytes.get(10..10 + tag_len)?;
    while frames.len() >= 10 {
        let id = &frames[..4];
        let len = u32::from_be_bytes(frames[4..8].try_into().ok()?) as usize;
        let body = frames.get(10..10 + len)?;
        if id == b"TXXX" {
            let body = &body[1..];
            if let Some(value) = body.strip_prefix(ID3_DESCRIPTION).and_then(|b| b.strip_prefix(b"\0")) {
                return Some(String::from_utf8_lossy(value).into_owned());
            }
        }
        frames = &frames[10 + len..];
    }
    None
}

fn mp4_box(kind: &[u8; 4], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + payload.len());
    out.extend_from_slice(&((8 + payload.len()) as u32).to_be_bytes());
    out.extend_from_slice(kind);
    out.extend_from_slice(payload);
    out
}

/// `ftyp` + `moov` holding an empty movie header + `free` with the descriptor.
fn mp4(descriptor: &str) -> Vec<u8> {
    let mut ftyp = b"isom".to_vec();
    ftyp.extend_from_slice(&0x200u32.to_be_bytes());
    ftyp.extend_from_slice(b"isommp41");

    let mut mvhd = vec![0u8; 4]; // version 0, no flags
    mvhd.extend_from_slice(&0u32.to_be_bytes()); // creation time
    mvhd.extend_from_slice(&0u32.to_be_bytes()); // modification time
    mvhd.extend_from_slice(&1000u32.to_be_bytes()); // timescale
    mvhd.extend_from_slice(&0u32.to_be_bytes()); // duration
    mvhd.extend_from_slice(&0x0001_0000u32.to_be_bytes()); // rate 1.0
    mvhd.extend_from_slice(&0x0100u16.to_be_bytes()); // volume 1.0
    mvhd.extend_from_slice(&[0u8; 10]);
    for v in [0x0001_0000u32, 0, 0, 0, 0x0001_0000, 0, 0, 0, 0x4000_0000] {
        mvhd.extend_from_slice(&v.to_be_bytes());
    }
    mvhd.extend_from_slice(&[0u8; 24]);
    mvhd.extend_from_slice(&1u32.to_be_bytes()); // next track id

    let mut free = MP4_TAG.to_vec();
    free.extend_from_slice(descriptor.as_bytes());

    let mut out = mp4_box(b"ftyp", &ftyp);
    out.extend(mp4_box(b"moov", &mp4_box(b"mvhd", &mvhd)));
    out.extend(mp4_box(b"free", &free));
    out
}

fn describe_mp4(bytes: &[u8]) -> Option<String> {
    let mut rest = bytes;
    while rest.len() >= 8 {
        let size = u32::from_be_bytes(rest[..4].try_into().ok()?) as usize;
        if size < 8 {
            return None;
        }
        let payload = rest.get(8..size)?;
        if &rest[4..8] == b"free" {
            if let Some(text) = payload.strip_prefix(MP4_TAG) {
                return Some(String::from_utf8_lossy(text).into_owned());
            }
        }
        rest = &rest[size..];
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptors_round_trip() {
        for ext in Extension::ALL {
            let bytes = placeholder(ext, "ocean waves at dawn");
            assert!(looks_valid(ext, &bytes), "{ext}");
            assert_eq!(describe(ext, &bytes).as_deref(), Some("ocean waves at dawn"), "{ext}");
        }
    }

    #[test]
    fn png_checksums() {
        let bytes = placeholder(Extension::Png, "x");
        // IHDR crc for a 1x1 RGBA 8-bit image is fixed.
        let ihdr = &bytes[8..8 + 25];
        assert_eq!(&ihdr[4..8], b"IHDR");
        let crc = crc32fast::hash(&ihdr[4..21]);
        assert_eq!(u32::from_be_bytes(ihdr[21..25].try_into().unwrap()), crc);
        assert_eq!(adler32(b"Wikipedia"), 0x11E6_0398);
    }

    #[test]
    fn mp4_header_layout() {
        let bytes = placeholder(Extension::Mp4, "");
        assert_eq!(&bytes[4..8], b"ftyp");
        let ftyp_len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(&bytes[ftyp_len + 4..ftyp_len + 8], b"moov");
        assert_eq!(&bytes[ftyp_len + 12..ftyp_len + 16], b"mvhd");
        assert_eq!(u32::from_be_bytes(bytes[ftyp_len + 8..ftyp_len + 12].try_into().unwrap()), 108);
    }

    #[test]
    fn sniffing() {
        for ext in Extension::ALL {
            assert_eq!(sniff(&placeholder(ext, "cat")), Some(ext));
        }
        assert_eq!(sniff(&[0xC3, 0x28]), None);
    }

    #[test]
    fn foreign_files_have_no_descriptor() {
        assert_eq!(describe(Extension::Png, b"not a png"), None);
        assert_eq!(describe(Extension::Mp3, &[0xFF, 0xFB, 0x90, 0x64]), None);
        assert_eq!(describe(Extension::Mp4, b"\x00\x00\x00\x08ftyp"), None);
    }
}
