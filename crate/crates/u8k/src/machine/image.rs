//! Binary images and the `u8k-image v1` text container.
//!
//! An image is a contiguous run of bytes at a fixed origin plus three
//! entry points (reset, syscall, timer) and an optional symbol table.
//! The text format is line-oriented:
//!
//! ```text
//! u8k-image v1
//! origin=0x38
//! entry.reset=0x38
//! entry.syscall=0x42
//! entry.timer=0x4e
//! sym cur=0xa0
//! 21 2a 51 e0 01 00 04 c0 ...
//! ```
//!
//! Serialization is canonical (lowercase hex, 16 bytes per row, symbols
//! sorted by name) so that parse/serialize round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Entry points advertised by an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryPoints {
    pub reset: u8,
    pub syscall: u8,
    pub timer: u8,
}

/// A loadable image: bytes at `origin`, entry points, symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineImage {
    pub origin: u8,
    pub bytes: Vec<u8>,
    pub entries: EntryPoints,
    pub symbols: BTreeMap<String, u8>,
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("image at {origin:#04x} with {len} bytes exceeds the 256-byte address space")]
    TooLarge { origin: u8, len: usize },
    #[error("images overlap at address {addr:#04x}")]
    Overlap { addr: u8 },
}

impl MachineImage {
    /// First address past the image. At most 0x100.
    pub fn end(&self) -> u16 {
        self.origin as u16 + self.bytes.len() as u16
    }

    pub fn contains(&self, addr: u8) -> bool {
        (addr as u16) >= self.origin as u16 && (addr as u16) < self.end()
    }

    /// Look up a symbol or parse a bare hex/decimal address.
    pub fn resolve(&self, name: &str) -> Option<u8> {
        if let Some(&a) = self.symbols.get(name) {
            return Some(a);
        }
        parse_byte(name).ok()
    }

    /// Render to the canonical `u8k-image v1` text form.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str("u8k-image v1\n");
        let _ = writeln!(out, "origin={:#04x}", self.origin);
        let _ = writeln!(out, "entry.reset={:#04x}", self.entries.reset);
        let _ = writeln!(out, "entry.syscall={:#04x}", self.entries.syscall);
        let _ = writeln!(out, "entry.timer={:#04x}", self.entries.timer);
        for (name, addr) in &self.symbols {
            let _ = writeln!(out, "sym {name}={addr:#04x}");
        }
        for row in self.bytes.chunks(16) {
            let hex: Vec<String> = row.iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(out, "{}", hex.join(" "));
        }
        out
    }

    /// Parse the text form produced by [`MachineImage::serialize`].
    pub fn parse(text: &str) -> Result<MachineImage, ImageError> {
        let err = |line: usize, msg: &str| ImageError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "u8k-image v1")) => {}
            _ => return Err(err(1, "expected header `u8k-image v1`")),
        }
        let mut origin: Option<u8> = None;
        let mut reset: Option<u8> = None;
        let mut syscall: Option<u8> = None;
        let mut timer: Option<u8> = None;
        let mut symbols = BTreeMap::new();
        let mut bytes = Vec::new();
        for (idx, raw) in lines {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("origin=") {
                origin = Some(parse_byte(rest).map_err(|m| err(line_no, &m))?);
            } else if let Some(rest) = line.strip_prefix("entry.reset=") {
                reset = Some(parse_byte(rest).map_err(|m| err(line_no, &m))?);
            } else if let Some(rest) = line.strip_prefix("entry.syscall=") {
                syscall = Some(parse_byte(rest).map_err(|m| err(line_no, &m))?);
            } else if let Some(rest) = line.strip_prefix("entry.timer=") {
                timer = Some(parse_byte(rest).map_err(|m| err(line_no, &m))?);
            } else if let Some(rest) = line.strip_prefix("sym ") {
                let (name, value) = rest
                    .split_once('=')
                    .ok_or_else(|| err(line_no, "expected `sym NAME=ADDR`"))?;
                let addr = parse_byte(value.trim()).map_err(|m| err(line_no, &m))?;
                if symbols.insert(name.trim().to_string(), addr).is_some() {
                    return Err(err(line_no, &format!("duplicate symbol `{}`", name.trim())));
                }
            } else {
                for tok in line.split_whitespace() {
                    let b = u8::from_str_radix(tok, 16)
                        .map_err(|_| err(line_no, &format!("bad hex byte `{tok}`")))?;
                    bytes.push(b);
                }
            }
        }
        let origin = origin.ok_or_else(|| err(0, "missing origin"))?;
        let entries = EntryPoints {
            reset: reset.ok_or_else(|| err(0, "missing entry.reset"))?,
            syscall: syscall.ok_or_else(|| err(0, "missing entry.syscall"))?,
            timer: timer.ok_or_else(|| err(0, "missing entry.timer"))?,
        };
        let img = MachineImage {
            origin,
            bytes,
            entries,
            symbols,
        };
        if img.end() > 0x100 {
            return Err(ImageError::TooLarge {
                origin: img.origin,
                len: img.bytes.len(),
            });
        }
        Ok(img)
    }
}

fn parse_byte(s: &str) -> Result<u8, String> {
    let s = s.trim();
    let r = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u8::from_str_radix(hex, 16)
    } else {
        s.parse()
    };
    r.map_err(|_| format!("bad byte value `{s}`"))
}

/// Place both images into a fresh 256-byte memory. Undefined addresses
/// read as zero. Fails if the images overlap or fall off the end.
pub fn load_images(kernel: &MachineImage, user: &MachineImage) -> Result<[u8; 256], ImageError> {
    for img in [kernel, user] {
        if img.end() > 0x100 {
            return Err(ImageError::TooLarge {
                origin: img.origin,
                len: img.bytes.len(),
            });
        }
    }
    let mut mem = [0u8; 256];
    let mut owned = [false; 256];
    for img in [kernel, user] {
        for (i, &b) in img.bytes.iter().enumerate() {
            let addr = img.origin as usize + i;
            if owned[addr] {
                return Err(ImageError::Overlap { addr: addr as u8 });
            }
            owned[addr] = true;
            mem[addr] = b;
        }
    }
    Ok(mem)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MachineImage {
        MachineImage {
            origin: 0x38,
            bytes: vec![0x24, 0xa0, 0x05, 0x52, 0x02, 0x00],
            entries: EntryPoints {
                reset: 0x38,
                syscall: 0x42,
                timer: 0x4e,
            },
            symbols: BTreeMap::from([("cur".to_string(), 0xa0), ("ctx".to_string(), 0xa1)]),
        }
    }

    #[test]
    fn serialize_parse_roundtrip_is_bit_exact() {
        let img = sample();
        let text = img.serialize();
        let back = MachineImage::parse(&text).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn parse_rejects_bad_header() {
        assert!(MachineImage::parse("u8k-image v2\norigin=0x00\n").is_err());
    }

    #[test]
    fn parse_rejects_bad_byte() {
        let text = "u8k-image v1\norigin=0x00\nentry.reset=0x00\nentry.syscall=0x00\nentry.timer=0x00\nzz\n";
        assert!(MachineImage::parse(text).is_err());
    }

    #[test]
    fn load_detects_overlap() {
        let a = MachineImage {
            origin: 0x10,
            bytes: vec![1, 2, 3, 4],
            ..sample()
        };
        let b = MachineImage {
            origin: 0x12,
            bytes: vec![9],
            ..sample()
        };
        match load_images(&a, &b) {
            Err(ImageError::Overlap { addr: 0x12 }) => {}
            other => panic!("expected overlap at 0x12, got {other:?}"),
        }
    }

    #[test]
    fn load_places_bytes_at_origin() {
        let a = MachineImage {
            origin: 0xa0,
            bytes: vec![0xa7, 0xa8],
            ..sample()
        };
        let b = MachineImage {
            origin: 0xac,
            bytes: vec![0xa2, 0x02],
            ..sample()
        };
        let mem = load_images(&a, &b).unwrap();
        assert_eq!(mem[0xa0], 0xa7);
        assert_eq!(mem[0xa1], 0xa8);
        assert_eq!(mem[0xac], 0xa2);
        assert_eq!(mem[0xad], 0x02);
        assert_eq!(mem[0x00], 0x00);
    }

    #[test]
    fn image_too_large_is_rejected() {
        let img = MachineImage {
            origin: 0xf0,
            bytes: vec![0; 0x20],
            ..sample()
        };
        assert!(matches!(
            MachineImage::parse(&img.serialize()),
            Err(ImageError::TooLarge { .. })
        ));
    }
}
