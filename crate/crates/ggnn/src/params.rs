//! Named parameter storage shared by all models, plus the text checkpoint
//! format. Gradients live next to the values so minibatch accumulation is a
//! plain `+=` into the slot, zeroed explicitly between batches.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = self.values.len();
        let (r, c) = value.shape();
        self.names.push(name.to_string());
        self.values.push(value);
        self.grads.push(Tensor::zeros(r, c));
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        self.grads[id.0].add_assign(delta)
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, c: f64) {
        for g in &mut self.grads {
            g.scale_assign(c);
        }
    }
}

const CHECKPOINT_HEADER: &str = "ggnn-checkpoint v1";

/// Text checkpoint: versioned header, `meta` key/value lines describing the
/// model that owns the tensors, then each tensor as a shape line followed by
/// one whitespace-separated line of values per row. f64 values are printed
/// with the shortest round-tripping representation, so save/load is bitwise.
pub fn write_checkpoint(store: &ParamStore, meta: &[(String, String)]) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    for (k, v) in meta {
        assert!(!k.contains(char::is_whitespace), "meta key {k:?} has whitespace");
        let _ = writeln!(out, "meta {k} {v}");
    }
    for id in store.ids() {
        let t = store.value(id);
        let _ = writeln!(out, "tensor {} {} {}", store.name(id), t.rows(), t.cols());
        for i in 0..t.rows() {
            let mut first = true;
            for v in t.row(i) {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
                first = false;
            }
            out.push('\n');
        }
    }
    out.push_str("end\n");
    out
}

pub fn read_checkpoint(text: &str) -> Result<(ParamStore, Vec<(String, String)>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("empty checkpoint".into()))?;
    if header.trim() != CHECKPOINT_HEADER {
        return Err(Error::Format(format!(
            "checkpoint version mismatch: expected {CHECKPOINT_HEADER:?}, got {header:?}"
        )));
    }
    let mut store = ParamStore::new();
    let mut meta = Vec::new();
    let mut saw_end = false;
    while let Some((lineno, line)) = lines.next() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if line == "end" {
            saw_end = true;
            break;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest
                .split_once(' ')
                .ok_or_else(|| Error::parse(lineno + 1, "meta needs key and value"))?;
            meta.push((k.to_string(), v.to_string()));
            continue;
        }
        let rest = line
            .strip_prefix("tensor ")
            .ok_or_else(|| Error::parse(lineno + 1, format!("unexpected line {line:?}")))?;
        let mut parts = rest.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::parse(lineno + 1, "tensor needs a name"))?;
        let rows: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(lineno + 1, "bad tensor rows"))?;
        let cols: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(lineno + 1, "bad tensor cols"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (rl, row) = lines
                .next()
                .ok_or_else(|| Error::parse(lineno + 1, format!("tensor {name} truncated")))?;
            for tok in row.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::parse(rl + 1, format!("bad float {tok:?}")))?;
                data.push(v);
            }
        }
        if data.len() != rows * cols {
            return Err(Error::Format(format!(
                "tensor {name}: expected {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        store.add(name, Tensor::from_vec(rows, cols, data)?);
    }
    if !saw_end {
        return Err(Error::Format("checkpoint missing end marker".into()));
    }
    Ok((store, meta))
}

pub fn meta_get<'a>(meta: &'a [(String, String)], key: &str) -> Result<&'a str> {
    meta.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("checkpoint missing meta key {key:?}")))
}
