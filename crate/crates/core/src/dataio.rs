//! ZFV: a flat little-endian container for feature datasets.
//!
//! ```text
//! "ZFV1"
//! u32 n_samples, visual_dim, semantic_dim, n_classes, n_domains
//! 4 × (u32 count, count × u32 id)    seen classes, unseen classes, seen domains, unseen domains
//! n_samples × (u32 domain, u32 class, visual_dim × f64)
//! u32 n_entries (= n_classes), n_entries × (u32 class, semantic_dim × f64)
//! ```

use std::path::Path;

use crate::bytes::{put_f64s, put_u32, Reader, Truncated};
use crate::synthdata::{Dataset, Split};

pub const ZFV_MAGIC: &[u8; 4] = b"ZFV1";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ZfvError {
    #[error("ZFV I/O: {0}")]
    Io(String),
    #[error("not a ZFV file: bad magic at byte 0")]
    BadMagic,
    #[error("ZFV truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed ZFV at byte {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
    #[error("dangling reference at byte {offset}: {detail}")]
    Referential { offset: usize, detail: String },
}

impl From<Truncated> for ZfvError {
    fn from(t: Truncated) -> Self {
        ZfvError::Truncated {
            offset: t.offset,
            needed: t.needed,
        }
    }
}

pub fn write_zfv(ds: &Dataset, path: &Path) -> Result<(), ZfvError> {
    let bytes = encode_zfv(ds)?;
    std::fs::write(path, bytes).map_err(|e| ZfvError::Io(format!("{}: {e}", path.display())))
}

pub fn read_zfv(path: &Path) -> Result<Dataset, ZfvError> {
    let bytes = std::fs::read(path).map_err(|e| ZfvError::Io(format!("{}: {e}", path.display())))?;
    decode_zfv(&bytes)
}

pub fn encode_zfv(ds: &Dataset) -> Result<Vec<u8>, ZfvError> {
    ds.validate().map_err(|e| ZfvError::Malformed {
        offset: 0,
        detail: format!("refusing to write: {e}"),
    })?;
    let mut out = Vec::with_capacity(64 + ds.len() * (8 + 8 * ds.visual_dim) + ds.semantics.len() * 8);
    out.extend_from_slice(ZFV_MAGIC);
    for v in [ds.len(), ds.visual_dim, ds.semantic_dim, ds.n_classes, ds.n_domains] {
        put_u32(&mut out, to_u32(v)?);
    }
    let s = &ds.split;
    for set in [&s.seen_classes, &s.unseen_classes, &s.seen_domains, &s.unseen_domains] {
        put_u32(&mut out, to_u32(set.len())?);
        set.iter().for_each(|&id| put_u32(&mut out, id));
    }
    for i in 0..ds.len() {
        put_u32(&mut out, ds.domains[i]);
        put_u32(&mut out, ds.classes[i]);
        put_f64s(&mut out, ds.row(i));
    }
    put_u32(&mut out, to_u32(ds.n_classes)?);
    for c in 0..ds.n_classes as u32 {
        put_u32(&mut out, c);
        put_f64s(&mut out, ds.semantic(c));
    }
    Ok(out)
}

fn to_u32(v: usize) -> Result<u32, ZfvError> {
    u32::try_from(v).map_err(|_| ZfvError::Malformed {
        offset: 0,
        detail: format!("{v} does not fit the 32-bit header"),
    })
}

pub fn decode_zfv(bytes: &[u8]) -> Result<Dataset, ZfvError> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| ZfvError::BadMagic)? != ZFV_MAGIC {
        return Err(ZfvError::BadMagic);
    }
    let malformed = |offset: usize, detail: String| ZfvError::Malformed { offset, detail };

    let mut head = [0usize; 5];
    for h in &mut head {
        *h = r.u32()? as usize;
    }
    let [n_samples, visual_dim, semantic_dim, n_classes, n_domains] = head;
    for (i, (name, v)) in [("visual_dim", visual_dim), ("semantic_dim", semantic_dim), ("class count", n_classes), ("domain count", n_domains)]
        .into_iter()
        .enumerate()
    {
        if v == 0 {
            return Err(malformed(8 + 4 * i, format!("{name} is zero")));
        }
    }

    let mut sets: [Vec<u32>; 4] = Default::default();
    for (k, set) in sets.iter_mut().enumerate() {
        let n = r.u32()? as usize;
        // Ids are u32, so the count must fit in what is left.
        if n.saturating_mul(4) > r.remaining() {
            return Err(ZfvError::Truncated {
                offset: r.offset(),
                needed: n * 4,
            });
        }
        let limit = if k < 2 { n_classes } else { n_domains };
        for _ in 0..n {
            let at = r.offset();
            let id = r.u32()?;
            if id as usize >= limit {
                return Err(malformed(at, format!("split id {id} out of range 0..{limit}")));
            }
            set.push(id);
        }
    }
    let [seen_classes, unseen_classes, seen_domains, unseen_domains] = sets;
    let split = Split {
        seen_classes,
        unseen_classes,
        seen_domains,
        unseen_domains,
    };
    let split_at = r.offset();
    split
        .validate(n_classes, n_domains)
        .map_err(|e| malformed(split_at, e.to_string()))?;

    // The semantic block carries one entry per class, so the whole file
    // size follows from the header; check it before allocating anything.
    let row_bytes = visual_dim.checked_mul(8).and_then(|b| b.checked_add(8));
    let entry_bytes = semantic_dim.checked_mul(8).and_then(|b| b.checked_add(4));
    let expected = row_bytes
        .and_then(|rb| rb.checked_mul(n_samples))
        .zip(entry_bytes.and_then(|eb| eb.checked_mul(n_classes)))
        .and_then(|(rows, table)| rows.checked_add(table)?.checked_add(4 + split_at));
    match expected {
        Some(total) if total < bytes.len() => {
            return Err(malformed(total, format!("{} trailing bytes", bytes.len() - total)));
        }
        Some(total) if total == bytes.len() => {}
        _ => {
            return Err(ZfvError::Truncated {
                offset: bytes.len(),
                needed: expected.map_or(usize::MAX, |t| t - bytes.len()),
            });
        }
    }
    let mut features = Vec::with_capacity(n_samples * visual_dim);
    let mut classes = Vec::with_capacity(n_samples);
    let mut domains = Vec::with_capacity(n_samples);
    let mut row_offsets = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let at = r.offset();
        let d = r.u32()?;
        if d as usize >= n_domains {
            return Err(malformed(at, format!("domain id {d} out of range 0..{n_domains}")));
        }
        let c = r.u32()?;
        let x = r.f64s(visual_dim)?;
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(malformed(at + 8 + 8 * k, "non-finite feature".into()));
        }
        row_offsets.push(at);
        domains.push(d);
        classes.push(c);
        features.extend(x);
    }

    let table_at = r.offset();
    let n_entries = r.u32()? as usize;
    if n_entries != n_classes {
        return Err(malformed(table_at, format!("{n_entries} semantic entries for {n_classes} classes")));
    }
    let mut semantic: Vec<Option<Vec<f64>>> = vec![None; n_classes];
    for _ in 0..n_entries {
        let at = r.offset();
        let c = r.u32()? as usize;
        let a = r.f64s(semantic_dim)?;
        let slot = semantic
            .get_mut(c)
            .ok_or_else(|| malformed(at, format!("semantic entry for class {c} beyond class count {n_classes}")))?;
        if slot.is_some() {
            return Err(malformed(at, format!("duplicate semantic entry for class {c}")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(malformed(at + 4, "non-finite semantic value".into()));
        }
        *slot = Some(a);
    }
    for (i, &c) in classes.iter().enumerate() {
        if semantic.get(c as usize).map_or(true, Option::is_none) {
            return Err(ZfvError::Referential {
                offset: row_offsets[i] + 4,
                detail: format!("row {i} has class {c} with no semantic entry"),
            });
        }
    }
    if let Some(c) = semantic.iter().position(Option::is_none) {
        return Err(ZfvError::Referential {
            offset: table_at,
            detail: format!("class {c} has no semantic entry"),
        });
    }

    Ok(Dataset {
        visual_dim,
        semantic_dim,
        n_classes,
        n_domains,
        features,
        classes,
        domains,
        semantics: semantic.into_iter().flatten().flatten().collect(),
        split,
    })
}
