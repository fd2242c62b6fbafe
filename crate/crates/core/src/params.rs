//! Named parameter store, its binary serialization, and the binding that
//! places parameters on a tape for one training pass.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use indexmap::IndexMap;

use crate::error::{CoreError, Result};
use crate::tape::{BufId, Tape};
use crate::tensor::TensorValue;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OBVCKPT1";

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: TensorValue,
    /// Trainable entries receive optimizer updates; frozen entries (running
    /// statistics, or a whole store acting as the teacher) never do.
    pub trainable: bool,
}

/// Ordered map name -> tensor. Iteration order is insertion order, which
/// fixes the serialization byte layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: TensorValue, trainable: bool) {
        self.entries.insert(name.to_string(), ParamEntry { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&TensorValue> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| CoreError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TensorValue> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| CoreError::UnknownParam(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Marks every entry frozen (or restores trainability per the names in
    /// `trainable`). Used to hold the teacher fixed for a round.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        for (_, e) in self.entries.iter_mut() {
            e.trainable = trainable;
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// First non-finite entry, if any: (name, flat index).
    pub fn find_non_finite(&self) -> Option<(String, usize)> {
        for (name, e) in self.entries.iter() {
            if let Some(i) = e.value.data.iter().position(|v| !v.is_finite()) {
                return Some((name.clone(), i));
            }
        }
        None
    }

    // ── serialization ──
    // Layout: magic "OBVCKPT1", then for each entry in insertion order:
    //   u32 name length, name bytes (utf-8), u32 rank, u32 per dimension,
    //   then raw little-endian f32 data. No padding, no trailer; the store
    //   ends at end of stream.

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for (name, e) in self.entries.iter() {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(e.value.shape.len() as u32).to_le_bytes())?;
            for &d in &e.value.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &e.value.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + self.total_elements() * 4);
        self.write_to(&mut buf).expect("writing to Vec cannot fail");
        buf
    }

    /// Reads a store until end of stream. `trainable` flags are reconstructed
    /// by convention: names ending in `.running_mean` / `.running_var` are
    /// frozen, everything else trainable.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| CoreError::Checkpoint("stream shorter than magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CoreError::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(CHECKPOINT_MAGIC)
            )));
        }
        let mut store = ParamStore::new();
        loop {
            let mut lenb = [0u8; 4];
            match r.read_exact(&mut lenb) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(lenb) as usize;
            if name_len > 4096 {
                return Err(CoreError::Checkpoint(format!("implausible name length {}", name_len)));
            }
            let mut nameb = vec![0u8; name_len];
            r.read_exact(&mut nameb)?;
            let name = String::from_utf8(nameb)
                .map_err(|_| CoreError::Checkpoint("entry name is not utf-8".into()))?;
            let mut rankb = [0u8; 4];
            r.read_exact(&mut rankb)?;
            let rank = u32::from_le_bytes(rankb) as usize;
            if rank > 8 {
                return Err(CoreError::Checkpoint(format!("implausible rank {} for `{}`", rank, name)));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut dimb = [0u8; 4];
                r.read_exact(&mut dimb)?;
                shape.push(u32::from_le_bytes(dimb) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0f32; n];
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(|_| {
                CoreError::Checkpoint(format!("truncated data for `{}` ({} elements)", name, n))
            })?;
            for (v, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
            let trainable = !(name.ends_with(".running_mean") || name.ends_with(".running_var"));
            store.insert(&name, TensorValue { shape, data, grad: None }, trainable);
        }
        Ok(store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(std::io::Cursor::new(bytes))
    }
}

/// Records which tape leaf each parameter was copied onto during one
/// forward pass. Binding a name twice reuses the leaf, so all uses of a
/// shared weight accumulate onto a single gradient buffer.
#[derive(Debug, Default)]
pub struct TapeBinding {
    map: IndexMap<String, BufId>,
}

impl TapeBinding {
    pub fn new() -> Self {
        TapeBinding::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<BufId> {
        if let Some(&id) = self.map.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?;
        let id = tape.leaf(value.shape.clone(), value.data.clone());
        self.map.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients for every trainable entry after a backward pass, keyed by
    /// name. Trainable parameters the tape never touched get zeros so the
    /// result always covers the optimizer's expected set.
    pub fn gradients(&self, tape: &Tape, store: &ParamStore) -> Result<BTreeMap<String, Vec<f32>>> {
        let mut out = BTreeMap::new();
        for name in store.trainable_names() {
            let grad = match self.map.get(&name).and_then(|&id| tape.grad(id)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; store.get(&name)?.len()],
            };
            out.insert(name, grad);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("layer.w", TensorValue::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0]).unwrap(), true);
        s.insert("layer.b", TensorValue::new(vec![3], vec![0.5, 0.25, -0.125]).unwrap(), true);
        s.insert("bn.running_mean", TensorValue::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap(), false);
        s
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let s = sample_store();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let s2 = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(s2.to_bytes(), bytes);
        assert_eq!(s2.get("layer.w").unwrap(), s.get("layer.w").unwrap());
        assert!(!s2.is_trainable("bn.running_mean"));
        assert!(s2.is_trainable("layer.b"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let s = sample_store();
        let mut bytes = s.to_bytes();
        bytes[0] = b'X';
        assert!(ParamStore::from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let s = sample_store();
        let bytes = s.to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn unknown_name_errors() {
        let s = sample_store();
        assert!(matches!(s.get("missing"), Err(CoreError::UnknownParam(_))));
    }
}
