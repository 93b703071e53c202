//! SFP1: little-endian binary scene pair.
//!
//! ```text
//! "SFP1" | flags u32 | n1 u32 | n2 u32 | pos1 f32[n1*3] | pos2 f32[n2*3]
//!        | col1 f32[n1*3] (flag bit 0) | col2 f32[n2*3] (bit 0)
//!        | flow f32[n1*3] (flag bit 1)
//! ```

use super::{ensure_valid, FlowField, Point3, PointCloud, ScenePair};
use crate::error::{Error, Result};

pub const SFP_MAGIC: &[u8; 4] = b"SFP1";
const HEADER_LEN: usize = 16;
const FLAG_COLOR: u32 = 0b01;
const FLAG_FLOW: u32 = 0b10;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn rows(&mut self, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                let mut p = [0.0; 3];
                for v in &mut p {
                    *v = f32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap())
                        as f64;
                    self.pos += 4;
                }
                p
            })
            .collect()
    }
}

pub fn load_sfp(bytes: &[u8]) -> Result<ScenePair> {
    if bytes.len() < 4 {
        return Err(Error::Length(format!("{} bytes is shorter than the magic", bytes.len())));
    }
    if &bytes[..4] != SFP_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length(format!("truncated header ({} bytes)", bytes.len())));
    }
    let mut r = Reader { bytes, pos: 4 };
    let flags = r.u32();
    if flags & !(FLAG_COLOR | FLAG_FLOW) != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#b}")));
    }
    let n1 = r.u32() as u64;
    let n2 = r.u32() as u64;
    let has_color = flags & FLAG_COLOR != 0;
    let has_flow = flags & FLAG_FLOW != 0;

    let mut rows = n1 + n2;
    if has_color {
        rows += n1 + n2;
    }
    if has_flow {
        rows += n1;
    }
    let expected = HEADER_LEN as u64 + rows * 12;
    if bytes.len() as u64 != expected {
        return Err(Error::Length(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    if n1 == 0 || n2 == 0 {
        return Err(Error::Validation(format!("empty cloud (n1={n1}, n2={n2})")));
    }
    let (n1, n2) = (n1 as usize, n2 as usize);
    let pos1 = r.rows(n1);
    let pos2 = r.rows(n2);
    let (col1, col2) = if has_color {
        (Some(r.rows(n1)), Some(r.rows(n2)))
    } else {
        (None, None)
    };
    let gt_flow = has_flow.then(|| FlowField {
        vectors: r.rows(n1),
    });
    let pair = ScenePair {
        id: String::new(),
        pc1: PointCloud {
            positions: pos1,
            colors: col1,
        },
        pc2: PointCloud {
            positions: pos2,
            colors: col2,
        },
        gt_flow,
    };
    ensure_valid(&pair)?;
    Ok(pair)
}

fn put_rows(out: &mut Vec<u8>, rows: &[Point3], what: &str) -> Result<()> {
    for v in rows.iter().flatten() {
        let f = *v as f32;
        if !f.is_finite() {
            return Err(Error::Validation(format!("{what}: value {v} is not finite at 32-bit")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

/// Canonical SFP1 encoding; values are narrowed to `f32`.
pub fn save_sfp(pair: &ScenePair) -> Result<Vec<u8>> {
    ensure_valid(pair)?;
    let (n1, n2) = (pair.pc1.len(), pair.pc2.len());
    let mut flags = 0;
    if pair.has_colors() {
        flags |= FLAG_COLOR;
    }
    if pair.gt_flow.is_some() {
        flags |= FLAG_FLOW;
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 12 * 3 * (n1 + n2));
    out.extend_from_slice(SFP_MAGIC);
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&u32::try_from(n1).map_err(|_| Error::Validation("n1 overflows u32".into()))?.to_le_bytes());
    out.extend_from_slice(&u32::try_from(n2).map_err(|_| Error::Validation("n2 overflows u32".into()))?.to_le_bytes());
    put_rows(&mut out, &pair.pc1.positions, "pos1")?;
    put_rows(&mut out, &pair.pc2.positions, "pos2")?;
    if let (Some(c1), Some(c2)) = (&pair.pc1.colors, &pair.pc2.colors) {
        put_rows(&mut out, c1, "col1")?;
        put_rows(&mut out, c2, "col2")?;
    }
    if let Some(flow) = &pair.gt_flow {
        put_rows(&mut out, &flow.vectors, "flow")?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_point() -> ScenePair {
        ScenePair {
            id: String::new(),
            pc1: PointCloud {
                positions: vec![[1.0, 2.0, 3.0]],
                colors: None,
            },
            pc2: PointCloud {
                positions: vec![[1.0, 2.0, 3.0]],
                colors: None,
            },
            gt_flow: Some(FlowField::zeros(1)),
        }
    }

    #[test]
    fn one_point_pair_layout() {
        let bytes = save_sfp(&one_point()).unwrap();
        assert_eq!(&bytes[..4], b"SFP1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 0b10);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 16 + 3 * 12);
        let back = load_sfp(&bytes).unwrap();
        assert_eq!(back, one_point());
    }

    #[test]
    fn bare_pair_length() {
        let mut p = one_point();
        p.gt_flow = None;
        p.pc2.positions.push([0.0; 3]);
        let bytes = save_sfp(&p).unwrap();
        // 16-byte header: magic + flags + n1 + n2.
        assert_eq!(bytes.len(), 16 + 4 * 3 * (1 + 2));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = save_sfp(&one_point()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(load_sfp(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_and_trailing_bytes() {
        let bytes = save_sfp(&one_point()).unwrap();
        assert!(matches!(load_sfp(&bytes[..bytes.len() - 1]), Err(Error::Length(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(load_sfp(&longer), Err(Error::Length(_))));
    }

    #[test]
    fn color_out_of_range_is_rejected() {
        let mut p = one_point();
        p.pc1.colors = Some(vec![[0.5; 3]]);
        p.pc2.colors = Some(vec![[0.5; 3]]);
        let mut bytes = save_sfp(&p).unwrap();
        // col1[0] starts after header + pos1 + pos2.
        let off = 16 + 12 + 12;
        bytes[off..off + 4].copy_from_slice(&2.0f32.to_le_bytes());
        assert!(matches!(load_sfp(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn non_finite_value_rejected_on_save() {
        let mut p = one_point();
        p.pc1.positions[0][0] = 1e300;
        assert!(matches!(save_sfp(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn huge_counts_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SFP1");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(load_sfp(&bytes), Err(Error::Length(_))));
    }
}
