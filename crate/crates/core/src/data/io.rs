use std::path::Path;

use super::{DataError, SequenceRecord};

const MAGIC: &[u8; 4] = b"SEQ0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2 + 2 + 1;

fn usage(msg: String) -> DataError {
    DataError::Usage(msg)
}

/// Serializes homogeneous records into the SEQ0 container.
pub fn encode_dataset(records: &[SequenceRecord]) -> Result<Vec<u8>, DataError> {
    let (frames, height, width, channels) = match records.first() {
        Some(r) => (r.frames, r.height, r.width, r.channels()),
        None => (0, 0, 0, 1),
    };
    for (i, r) in records.iter().enumerate() {
        if (r.frames, r.height, r.width, r.channels()) != (frames, height, width, channels)
            || r.data.len() != frames * height * width * channels
        {
            return Err(usage(format!("record {i} differs in shape from record 0")));
        }
    }
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| usage(format!("{what} {v} exceeds the container's u16 field")))
    };
    let count = u32::try_from(records.len())
        .map_err(|_| usage(format!("{} sequences exceed the u32 count field", records.len())))?;
    let channels =
        u8::try_from(channels).map_err(|_| usage(format!("{channels} channels exceed the u8 field")))?;
    let payload: usize = records.iter().map(|r| r.data.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&narrow(frames, "frame count")?.to_le_bytes());
    out.extend_from_slice(&narrow(height, "height")?.to_le_bytes());
    out.extend_from_slice(&narrow(width, "width")?.to_le_bytes());
    out.push(channels);
    for r in records {
        out.extend_from_slice(&r.data);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SequenceRecord>, DataError> {
    let fail = |offset: usize, message: String| DataError::Format { offset, message };
    if bytes.len() < HEADER_LEN {
        return Err(fail(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(
            0,
            format!(
                "expected magic \"SEQ0\", found {:?}",
                String::from_utf8_lossy(&bytes[0..4])
            ),
        ));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap()) as usize;
    let version = u32_at(4);
    if version != VERSION {
        return Err(fail(
            4,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let count = u32_at(8) as usize;
    let (frames, height, width) = (u16_at(12), u16_at(14), u16_at(16));
    let channels = bytes[18] as usize;
    let seq_len = frames * height * width * channels;
    let expected = HEADER_LEN + count * seq_len;
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!(
                "payload length mismatch: expected {expected} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    Ok((0..count)
        .map(|i| {
            let start = HEADER_LEN + i * seq_len;
            SequenceRecord {
                frames,
                height,
                width,
                data: bytes[start..start + seq_len].to_vec(),
                provenance: None,
            }
        })
        .collect())
}

pub fn write_dataset(records: &[SequenceRecord], path: &Path) -> Result<(), DataError> {
    let bytes = encode_dataset(records)?;
    std::fs::write(path, bytes).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<SequenceRecord>, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    decode_dataset(&bytes)
}
