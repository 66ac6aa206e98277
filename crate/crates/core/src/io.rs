//! Descriptor-set (`.dsc`, DSC1) and match-list (`.mch`, MCH1) files.
//!
//! DSC1 layout, all integers little-endian:
//!
//! ```text
//! "DSC1" | dtype u8 (0 binary, 1 float) | dim u16 | count u32
//! | count rows (binary: dim bytes, float: dim x f32)
//! | flags u8 (bit0 keypoints follow, bit1 landmark ids follow)
//! | [count x (f32 x, f32 y)] | [count x u32 landmark id]
//! ```
//!
//! MCH1 layout: `"MCH1" | count u32 | count x (u32 idx_a, u32 idx_b)`.

use std::io::Read;
use std::path::Path;

use crate::descriptor::{Descriptor, DescriptorKind, DescriptorSet, Keypoint, Signature};
use crate::format::{count_u32, put_f32, put_u16, put_u32, read_file, write_file, ByteReader, FormatError};

pub const DSC_MAGIC: &[u8; 4] = b"DSC1";
pub const MCH_MAGIC: &[u8; 4] = b"MCH1";

const FLAG_KEYPOINTS: u8 = 0b01;
const FLAG_LANDMARKS: u8 = 0b10;
const DSC_HEADER_LEN: usize = 4 + 1 + 2 + 4;

pub fn encode_descriptor_set(set: &DescriptorSet, out: &mut Vec<u8>) -> Result<(), FormatError> {
    let sig = set.signature();
    out.extend_from_slice(DSC_MAGIC);
    out.push(sig.kind.code());
    put_u16(out, sig.dim);
    put_u32(out, count_u32(set.len(), "descriptor")?);
    for d in set.descriptors() {
        put_row(out, d);
    }
    let mut flags = 0;
    if set.keypoints().is_some() {
        flags |= FLAG_KEYPOINTS;
    }
    if set.landmark_ids().is_some() {
        flags |= FLAG_LANDMARKS;
    }
    out.push(flags);
    if let Some(kps) = set.keypoints() {
        for k in kps {
            put_f32(out, k.x);
            put_f32(out, k.y);
        }
    }
    if let Some(ids) = set.landmark_ids() {
        ids.iter().for_each(|id| put_u32(out, *id));
    }
    Ok(())
}

pub(crate) fn put_row(out: &mut Vec<u8>, d: &Descriptor) {
    match d {
        Descriptor::Binary(b) => out.extend_from_slice(b),
        Descriptor::Float(v) => v.iter().for_each(|x| put_f32(out, *x)),
    }
}

pub(crate) fn decode_row(row: &[u8], kind: DescriptorKind) -> Descriptor {
    match kind {
        DescriptorKind::Binary => Descriptor::Binary(row.to_vec()),
        DescriptorKind::Float => Descriptor::Float(
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    }
}

pub fn descriptor_set_to_bytes(set: &DescriptorSet) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(DSC_HEADER_LEN + set.len() * set.signature().row_bytes() + 1);
    encode_descriptor_set(set, &mut out)?;
    Ok(out)
}

pub(crate) fn decode_descriptor_set(r: &mut ByteReader<'_>) -> Result<DescriptorSet, FormatError> {
    r.magic(DSC_MAGIC)?;
    let kind_offset = r.pos();
    let code = r.u8()?;
    let kind = DescriptorKind::from_code(code)
        .ok_or_else(|| FormatError::invalid(kind_offset, format!("unknown dtype {code}")))?;
    let dim_offset = r.pos();
    let dim = r.u16()?;
    let sig = Signature::new(kind, dim as usize).map_err(|e| FormatError::invalid(dim_offset, e.to_string()))?;
    let count = r.u32()? as usize;
    let payload = r.take(
        count
            .checked_mul(sig.row_bytes())
            .ok_or_else(|| FormatError::invalid(dim_offset, "payload size overflows"))?,
    )?;
    let descriptors: Vec<Descriptor> = payload
        .chunks_exact(sig.row_bytes())
        .map(|row| decode_row(row, kind))
        .collect();
    let flags_offset = r.pos();
    let flags = r.u8()?;
    if flags & !(FLAG_KEYPOINTS | FLAG_LANDMARKS) != 0 {
        return Err(FormatError::invalid(
            flags_offset,
            format!("unknown flags {flags:#04x}"),
        ));
    }
    // Signature already validated every row's shape.
    let mut set = DescriptorSet::new(sig, descriptors).expect("rows match signature");
    if flags & FLAG_KEYPOINTS != 0 {
        let mut kps = Vec::with_capacity(count);
        for _ in 0..count {
            let x = r.f32()?;
            let y = r.f32()?;
            kps.push(Keypoint::new(x, y));
        }
        set = set.with_keypoints(kps).expect("lengths agree");
    }
    if flags & FLAG_LANDMARKS != 0 {
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(r.u32()?);
        }
        set = set.with_landmark_ids(ids).expect("lengths agree");
    }
    Ok(set)
}

pub fn descriptor_set_from_bytes(bytes: &[u8]) -> Result<DescriptorSet, FormatError> {
    let mut r = ByteReader::new(bytes);
    let set = decode_descriptor_set(&mut r)?;
    r.finish()?;
    Ok(set)
}

/// Reads exactly one DSC1 record from a stream, leaving the stream positioned
/// after it. Error offsets are relative to the start of the record.
pub fn read_descriptor_set_from(reader: &mut impl Read) -> Result<DescriptorSet, FormatError> {
    let mut buf = vec![0u8; DSC_HEADER_LEN];
    read_exact_or_truncated(reader, &mut buf, 0)?;
    // Validate the header before trusting its sizes.
    {
        let mut r = ByteReader::new(&buf);
        r.magic(DSC_MAGIC)?;
    }
    let kind = DescriptorKind::from_code(buf[4])
        .ok_or_else(|| FormatError::invalid(4, format!("unknown dtype {}", buf[4])))?;
    let dim = u16::from_le_bytes([buf[5], buf[6]]) as usize;
    let count = u32::from_le_bytes(buf[7..11].try_into().unwrap()) as usize;
    let row = match kind {
        DescriptorKind::Binary => dim,
        DescriptorKind::Float => dim * 4,
    };
    let body = count * row + 1;
    let start = buf.len();
    buf.resize(start + body, 0);
    read_exact_or_truncated(reader, &mut buf[start..], start)?;
    let flags = *buf.last().unwrap();
    let mut extra = 0;
    if flags & FLAG_KEYPOINTS != 0 {
        extra += count * 8;
    }
    if flags & FLAG_LANDMARKS != 0 {
        extra += count * 4;
    }
    let start = buf.len();
    buf.resize(start + extra, 0);
    read_exact_or_truncated(reader, &mut buf[start..], start)?;
    descriptor_set_from_bytes(&buf)
}

fn read_exact_or_truncated(reader: &mut impl Read, buf: &mut [u8], offset: usize) -> Result<(), FormatError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(FormatError::Truncated {
                    offset: offset + filled,
                    needed: buf.len() - filled,
                    available: 0,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn read_descriptor_set(path: impl AsRef<Path>) -> Result<DescriptorSet, FormatError> {
    descriptor_set_from_bytes(&read_file(path.as_ref())?)
}

pub fn write_descriptor_set(set: &DescriptorSet, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_file(path.as_ref(), &descriptor_set_to_bytes(set)?)
}

pub fn matches_to_bytes(matches: &[(u32, u32)]) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(8 + matches.len() * 8);
    out.extend_from_slice(MCH_MAGIC);
    put_u32(&mut out, count_u32(matches.len(), "match")?);
    for (a, b) in matches {
        put_u32(&mut out, *a);
        put_u32(&mut out, *b);
    }
    Ok(out)
}

pub fn matches_from_bytes(bytes: &[u8]) -> Result<Vec<(u32, u32)>, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(MCH_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let a = r.u32()?;
        let b = r.u32()?;
        out.push((a, b));
    }
    r.finish()?;
    Ok(out)
}

pub fn read_matches(path: impl AsRef<Path>) -> Result<Vec<(u32, u32)>, FormatError> {
    matches_from_bytes(&read_file(path.as_ref())?)
}

pub fn write_matches(matches: &[(u32, u32)], path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_file(path.as_ref(), &matches_to_bytes(matches)?)
}
