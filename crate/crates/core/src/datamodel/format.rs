//! SSNF binary feature files.
//!
//! ```text
//! header   "SSNF" | version u32 | d_raw u32 | d u32          (16 bytes)
//! items    count u64, then per item:
//!          id u64 | role u8 | token count u32 | global d*f32 | tokens T*w*f32
//!          (w = d_raw for image roles, d for text)
//! triplets count u64, then per triplet:
//!          ref u64 | text u64 | target u64 | subset flag u8 | [6 * u64]
//! ```
//!
//! All integers and floats are little-endian; floats are IEEE-754 binary32.

use std::path::Path;

use super::{FeatureStore, Role, TokenFeatures, Triplet, SUBSET_SIZE};
use crate::error::{Result, SsnError};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"SSNF";
pub const VERSION: u32 = 1;

pub fn encode_store(store: &FeatureStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.d_raw() as u32).to_le_bytes());
    out.extend_from_slice(&(store.d() as u32).to_le_bytes());
    out.extend_from_slice(&(store.items().len() as u64).to_le_bytes());
    for item in store.items() {
        out.extend_from_slice(&item.item_id.to_le_bytes());
        out.push(item.role.code());
        out.extend_from_slice(&(item.token_count() as u32).to_le_bytes());
        for v in &item.global {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in item.tokens.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(store.triplets().len() as u64).to_le_bytes());
    for t in store.triplets() {
        out.extend_from_slice(&t.reference_id.to_le_bytes());
        out.extend_from_slice(&t.text_id.to_le_bytes());
        out.extend_from_slice(&t.target_id.to_le_bytes());
        match &t.subset_ids {
            Some(ids) => {
                out.push(1);
                for id in ids {
                    out.extend_from_slice(&id.to_le_bytes());
                }
            }
            None => out.push(0),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(SsnError::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            SsnError::format(self.pos as u64, format!("{what} length overflows"))
        })?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_store(buf: &[u8]) -> Result<FeatureStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(SsnError::format(0, "bad magic, expected SSNF"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SsnError::format(4, format!("unsupported version {version}")));
    }
    let d_raw = r.u32("d_raw")? as usize;
    let d = r.u32("d")? as usize;
    let mut store = FeatureStore::new(d_raw, d);
    let n_items = r.u64("item count")?;
    for _ in 0..n_items {
        let at = r.pos as u64;
        let item_id = r.u64("item id")?;
        let role_at = r.pos as u64;
        let role = Role::from_code(r.u8("role")?)
            .ok_or_else(|| SsnError::format(role_at, "unknown role code"))?;
        let t = r.u32("token count")? as usize;
        let global = r.f32s(d, "global vector")?;
        let width = if role.is_image() { d_raw } else { d };
        let tokens = r.f32s(t * width, "tokens")?;
        let tokens = Tensor::matrix(t, width, tokens)?;
        store
            .insert(TokenFeatures {
                item_id,
                role,
                global,
                tokens,
            })
            .map_err(|e| SsnError::format(at, e.to_string()))?;
    }
    let n_triplets = r.u64("triplet count")?;
    for _ in 0..n_triplets {
        let at = r.pos as u64;
        let reference_id = r.u64("reference id")?;
        let text_id = r.u64("text id")?;
        let target_id = r.u64("target id")?;
        let flag_at = r.pos as u64;
        let subset_ids = match r.u8("subset flag")? {
            0 => None,
            1 => {
                let mut ids = [0u64; SUBSET_SIZE];
                for id in &mut ids {
                    *id = r.u64("subset id")?;
                }
                Some(ids)
            }
            f => return Err(SsnError::format(flag_at, format!("subset flag {f}"))),
        };
        store
            .push_triplet(Triplet {
                reference_id,
                text_id,
                target_id,
                subset_ids,
            })
            .map_err(|e| SsnError::format(at, e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(SsnError::format(
            r.pos as u64,
            format!("{} trailing bytes", buf.len() - r.pos),
        ));
    }
    Ok(store)
}

pub fn save_store(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_store(store)).map_err(|e| SsnError::io(path, e))
}

pub fn load_store(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| SsnError::io(path, e))?;
    decode_store(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_store_is_header_plus_counts() {
        let store = FeatureStore::new(768, 512);
        let bytes = encode_store(&store);
        assert_eq!(&bytes[..4], b"SSNF");
        // 16-byte fixed header followed by the zero item and triplet counts.
        assert_eq!(bytes.len(), 16 + 8 + 8);
        assert_eq!(decode_store(&bytes).unwrap(), store);
    }

    #[test]
    fn single_text_item_round_trip() {
        let mut store = FeatureStore::new(4, 4);
        store
            .insert(TokenFeatures {
                item_id: 9,
                role: Role::Text,
                global: vec![0.25, -1.0, f32::MIN_POSITIVE, 3.5],
                tokens: Tensor::matrix(3, 4, (0..12).map(|i| i as f32 * 0.1 - 0.7).collect())
                    .unwrap(),
            })
            .unwrap();
        let back = decode_store(&encode_store(&store)).unwrap();
        assert_eq!(back, store);
        let bits = |s: &FeatureStore| -> Vec<u32> {
            s.items()[0].tokens.data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&back), bits(&store));
    }

    #[test]
    fn header_errors_carry_offsets() {
        let mut bytes = encode_store(&FeatureStore::new(2, 2));
        bytes[4] = 7;
        match decode_store(&bytes) {
            Err(SsnError::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        match decode_store(b"XXXX") {
            Err(SsnError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_and_collision() {
        let mut store = FeatureStore::new(2, 2);
        for id in [1, 2] {
            store
                .insert(TokenFeatures {
                    item_id: id,
                    role: Role::TargetImage,
                    global: vec![1.0, 2.0],
                    tokens: Tensor::zeros(&[1, 2]),
                })
                .unwrap();
        }
        let bytes = encode_store(&store);
        let cut = &bytes[..bytes.len() - 12];
        assert!(matches!(decode_store(cut), Err(SsnError::Format { .. })));
        // Rewrite the second id to collide with the first.
        let mut dup = bytes.clone();
        let item_size = 8 + 1 + 4 + 2 * 4 + 2 * 4;
        let second = 24 + item_size;
        dup[second..second + 8].copy_from_slice(&1u64.to_le_bytes());
        match decode_store(&dup) {
            Err(SsnError::Format { offset, message }) => {
                assert_eq!(offset, second as u64);
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
        let mut trailing = bytes;
        trailing.push(0);
        assert!(decode_store(&trailing).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ssnf");
        let store = FeatureStore::new(3, 2);
        save_store(&store, &path).unwrap();
        assert_eq!(load_store(&path).unwrap(), store);
        assert!(matches!(load_store(dir.path().join("missing")), Err(SsnError::Io { .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_stores_round_trip(
            raw in proptest::collection::vec(
                (any::<bool>(), 1usize..4, proptest::collection::vec(-1e6f32..1e6, 40)),
                0..12,
            )
        ) {
            let (d_raw, d) = (5, 3);
            let mut store = FeatureStore::new(d_raw, d);
            for (i, (is_text, t, pool)) in raw.iter().enumerate() {
                let role = if *is_text { Role::Text } else { Role::TargetImage };
                let w = if *is_text { d } else { d_raw };
                store.insert(TokenFeatures {
                    item_id: i as u64 * 3 + 1,
                    role,
                    global: pool[..d].to_vec(),
                    tokens: Tensor::matrix(*t, w, pool[d..d + t * w].to_vec()).unwrap(),
                }).unwrap();
            }
            let bytes = encode_store(&store);
            let back = decode_store(&bytes).unwrap();
            prop_assert_eq!(&back, &store);
            prop_assert_eq!(encode_store(&back), bytes);
        }
    }
}
