//! Named parameter tensors, their gradients, and the Adam optimizer.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{f64s_from_le_bytes, f64s_to_le_bytes, write_atomic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Writes `manifest.json` plus one raw little-endian f64 blob per tensor into `dir`.
    pub fn save_dir(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let file = format!("{name}.bin");
            let std = t.as_standard_layout();
            write_atomic(&dir.join(&file), &f64s_to_le_bytes(std.as_slice().unwrap()))?;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                file,
            });
        }
        let manifest = Manifest {
            tensors: entries,
            extra,
        };
        write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    /// Inverse of [`ParamStore::save_dir`]; returns the store and the manifest's extra payload.
    pub fn load_dir(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::MissingArtifact(mpath));
        }
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(&mpath)?)?;
        let mut store = ParamStore::new();
        for e in manifest.tensors {
            let path = dir.join(&e.file);
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            let values = f64s_from_le_bytes(&std::fs::read(&path)?).map_err(|reason| Error::Format {
                path: path.clone(),
                reason,
            })?;
            let t = Array2::from_shape_vec((e.shape[0], e.shape[1]), values).map_err(|err| Error::Format {
                path: path.clone(),
                reason: err.to_string(),
            })?;
            store.add(e.name, t);
        }
        Ok((store, manifest.extra))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Array2<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.0[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<f64>) {
        self.0[id.0] += g;
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            a.mapv_inplace(|v| v * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment state; `step` counts applied updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Grads,
    pub v: Grads,
    pub step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.0.iter().enumerate() {
            let m = &mut self.m.0[i];
            let v = &mut self.v.0[i];
            let p = &mut params.tensors[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let mut g = store.zeros_like();
            g.accumulate(id, &(store.get(id) * 2.0));
            opt.update(&mut store, &g);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn save_and_load_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("a.w", array![[1.0, 2.0], [3.0, 4.0]]);
        store.add("b", array![[0.5]]);
        store.save_dir(dir.path(), serde_json::json!({"k": 1})).unwrap();
        assert!(dir.path().join("a.w.bin").exists());
        let (back, extra) = ParamStore::load_dir(dir.path()).unwrap();
        assert_eq!(back, store);
        assert_eq!(extra["k"], 1);
        std::fs::remove_file(dir.path().join("b.bin")).unwrap();
        assert!(matches!(ParamStore::load_dir(dir.path()), Err(Error::MissingArtifact(_))));
    }
}
