use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Graph, Result, Tensor, TensorError, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, kept in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Overwrite a parameter's values, keeping its shape.
    pub fn assign(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {name}")))?;
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(TensorError::Shape(format!(
                "parameter {name}: stored {:?}, assigned {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor.clone();
        Ok(())
    }

    /// Keep only the parameters whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for (_, name, t) in self.iter() {
            if keep(name) {
                out.insert(name, t.clone()).expect("names are unique");
            }
        }
        out
    }

    /// Serialise as a sequence of entries: name (u32 length + UTF-8), rank
    /// (u32), extents (u32 each), values (f64), all little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for (_, name, t) in self.iter() {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                let e = u32::try_from(e)
                    .map_err(|_| TensorError::Format(format!("extent {e} exceeds u32")))?;
                w.write_all(&e.to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        let mut store = ParamStore::new();
        while cur.pos < buf.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| TensorError::Format(format!("parameter name: {e}")))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.numel() * 8 + 64 * self.len());
        self.write_to(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(TensorError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A graph plus lazily-bound parameters from a store.
///
/// Each parameter is recorded at most once per session, so its gradient is
/// the total over every use.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Session<'a> {
    /// A session whose parameters require gradients.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_mode(store, true)
    }

    /// A session for forward evaluation only.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .graph
            .leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters that were touched by this session.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradient for every parameter in the store (zeros where untouched).
    pub fn gradients(&self) -> Vec<Vec<f64>> {
        self.store
            .iter()
            .map(|(id, _, t)| {
                self.bound[id.0]
                    .and_then(|v| self.graph.grad(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_layout_is_exact() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap())
            .unwrap();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        let mut expect = Vec::new();
        expect.extend(1u32.to_le_bytes());
        expect.extend(b"w");
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.5f64.to_le_bytes());
        expect.extend((-2.0f64).to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(ParamStore::read_from(bytes.as_slice()).unwrap(), s);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut s = ParamStore::new();
        s.insert("bias", Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        bytes.pop();
        assert!(matches!(
            ParamStore::read_from(bytes.as_slice()),
            Err(TensorError::Format(_))
        ));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn session_binds_each_param_once() {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::row(vec![3.0])).unwrap();
        let mut sess = Session::new(&s);
        let a = sess.param(id);
        let b = sess.param(id);
        assert_eq!(a, b);
        let y = sess.graph.mul(a, b).unwrap();
        let l = sess.graph.sum(y).unwrap();
        sess.backward(l).unwrap();
        assert_eq!(sess.gradients()[0], vec![6.0]);
    }
}
