//! Named parameter store and the SPDW1 checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::tensor::TensorF;
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"SPDW1";
const VERSION: u32 = 1;

/// Ordered collection of named parameter tensors with per-parameter
/// trainable flags. Insertion order is the layer order used by freezing.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<TensorF>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: TensorF) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::validation(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.trainable.push(true);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&TensorF> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorF> {
        let i = *self.index.get(name)?;
        Some(&mut self.tensors[i])
    }

    pub fn at(&self, i: usize) -> (&str, &TensorF, bool) {
        (&self.names[i], &self.tensors[i], self.trainable[i])
    }

    pub fn at_mut(&mut self, i: usize) -> (&str, &mut TensorF, bool) {
        (&self.names[i], &mut self.tensors[i], self.trainable[i])
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn set_trainable(&mut self, i: usize, flag: bool) {
        self.trainable[i] = flag;
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        self.trainable.iter_mut().for_each(|t| *t = flag);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorF, bool)> {
        (0..self.len()).map(move |i| self.at(i))
    }

    /// Deep copy of the tensor values (for checkpoints of the best epoch).
    pub fn snapshot_values(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.values().to_vec()).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.tensors.len() {
            return Err(Error::validation("snapshot cardinality mismatch"));
        }
        for (t, s) in self.tensors.iter_mut().zip(snapshot) {
            if t.len() != s.len() {
                return Err(Error::validation("snapshot tensor length mismatch"));
            }
            t.values_mut().copy_from_slice(s);
        }
        Ok(())
    }

    // -- SPDW1 checkpoint ----------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, tensor, _) in self.iter() {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::validation(format!("parameter name too long: {name:?}")));
            }
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &t in &self.trainable {
            buf.push(t as u8);
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path };
        let magic = cur.take(5)?;
        if magic != MAGIC {
            return Err(Error::corrupt(format!(
                "{}: bad magic {:?}, expected {:?}",
                path.display(),
                String::from_utf8_lossy(magic),
                "SPDW1"
            )));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::corrupt(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let n_params = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n_params {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::corrupt(format!("{}: non-UTF8 name", path.display())))?;
            let rank = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(cur.f64()?);
            }
            store.insert(&name, TensorF::new(shape, values)?)?;
        }
        for i in 0..n_params {
            let flag = cur.u8()?;
            store.set_trainable(i, flag != 0);
        }
        if cur.pos != bytes.len() {
            return Err(Error::corrupt(format!(
                "{}: {} trailing bytes after checkpoint payload",
                path.display(),
                bytes.len() - cur.pos
            )));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(format!("{}: truncated file", self.path.display())));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
