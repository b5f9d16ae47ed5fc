//! Plain-text parameter checkpoints.
//!
//! ```text
//! mmnet-checkpoint 1
//! meta <key> <value...>
//! tensor <name> <param|buffer> <ndim> <d0> <d1> ...
//! <v0> <v1> ... (row-major, one line)
//! ```
//!
//! Values use Rust's shortest round-trip decimal form for `f64`, so a
//! save/load cycle is bit-exact. Tensors appear in store order, metadata in
//! the order given; identical stores always produce identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::DenseTensor;

const MAGIC: &str = "mmnet-checkpoint 1";

pub fn to_string(store: &ParamStore, meta: &[(String, String)]) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for (k, v) in meta {
        let _ = writeln!(out, "meta {k} {v}");
    }
    for id in store.ids() {
        let t = store.get(id);
        let kind = if t.requires_grad { "param" } else { "buffer" };
        let _ = write!(out, "tensor {} {} {}", store.name(id), kind, t.ndim());
        for d in t.shape() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let mut first = true;
        for v in t.data() {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    out
}

pub struct Checkpoint {
    pub store: ParamStore,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn from_str(text: &str, origin: &Path) -> Result<Checkpoint> {
    let err = |line: usize, msg: &str| Error::parse(origin, format!("line {}: {msg}", line + 1));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(err(0, "missing checkpoint header")),
    }
    let mut store = ParamStore::new();
    let mut meta = Vec::new();
    while let Some((no, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            meta.push((k.to_string(), v.to_string()));
            continue;
        }
        let head: Vec<&str> = line.split_ascii_whitespace().collect();
        if head.len() < 4 || head[0] != "tensor" {
            return Err(err(no, "expected a tensor header"));
        }
        let ndim: usize = head[3].parse().map_err(|_| err(no, "bad ndim"))?;
        if head.len() != 4 + ndim {
            return Err(err(no, "shape length does not match ndim"));
        }
        let shape = head[4..]
            .iter()
            .map(|d| d.parse::<usize>().map_err(|_| err(no, "bad extent")))
            .collect::<Result<Vec<_>>>()?;
        let (vno, values) = lines.next().ok_or_else(|| err(no, "missing values line"))?;
        let data = values
            .split_ascii_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| err(vno, "bad value")))
            .collect::<Result<Vec<_>>>()?;
        let t = DenseTensor::new(shape, data).map_err(|e| err(vno, &e.to_string()))?;
        if store.lookup(head[1]).is_some() {
            return Err(err(no, "duplicate tensor name"));
        }
        match head[2] {
            "param" => store.add_param(head[1], t),
            "buffer" => store.add_buffer(head[1], t),
            _ => return Err(err(no, "tensor kind must be param or buffer")),
        };
    }
    Ok(Checkpoint { store, meta })
}

pub fn save(path: &Path, store: &ParamStore, meta: &[(String, String)]) -> Result<()> {
    std::fs::write(path, to_string(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut s = ParamStore::new();
            let n = vals.len();
            s.add_param("layer.w", DenseTensor::new(vec![n], vals.clone()).unwrap());
            s.add_buffer("layer.running_mean", DenseTensor::new(vec![1, n], vals).unwrap());
            let text = to_string(&s, &[("target".into(), "agb".into())]);
            let back = from_str(&text, Path::new("mem")).unwrap();
            prop_assert_eq!(back.meta("target"), Some("agb"));
            prop_assert_eq!(to_string(&back.store, &back.meta), text);
            for id in s.ids() {
                let a = s.get(id);
                let b = back.store.get(back.store.lookup(s.name(id)).unwrap());
                prop_assert_eq!(a.shape(), b.shape());
                prop_assert_eq!(a.requires_grad, b.requires_grad);
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_str("nope", Path::new("x")).is_err());
        let bad = format!("{MAGIC}\ntensor a param 1 3\n1 2\n");
        assert!(from_str(&bad, Path::new("x")).is_err());
    }
}
