use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::graph::{Gradients, Graph, Var};
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameters in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push((name.to_string(), value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (n, t) in other.iter() {
            self.insert(&format!("{prefix}.{n}"), t.clone());
        }
    }

    /// Entries whose names start with `prefix.`, with the prefix removed.
    pub fn sub_store(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        let p = format!("{prefix}.");
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(&p) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Uniform `(-bound, bound)` init.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut RngStream) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
        self.insert(name, Tensor::new(shape, data).expect("init shape"));
    }

    /// He-uniform init scaled by fan-in (`shape[1..]` product).
    pub fn init_fan_in(&mut self, name: &str, shape: &[usize], rng: &mut RngStream) {
        let fan_in: usize = shape[1..].iter().product();
        self.init_uniform(name, shape, (6.0 / fan_in as f64).sqrt(), rng);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    /// Writes `index.tsv` plus one `T2IT` file per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        for (name, t) in self.iter() {
            let file = format!("{name}.t2it");
            let path = dir.join(&file);
            fs::write(&path, t.to_bytes()).map_err(|e| Error::io(&path, e))?;
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            index.push_str(&format!("{name}\t{file}\t{}\n", dims.join("x")));
        }
        let path = dir.join("index.tsv");
        fs::write(&path, index).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.tsv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut store = ParamStore::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let mut parts = line.split('\t');
            let (Some(name), Some(file)) = (parts.next(), parts.next()) else {
                return Err(Error::Format {
                    path: path.clone(),
                    msg: format!("malformed line {line:?}"),
                });
            };
            let p = dir.join(file);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let t = Tensor::from_bytes(&bytes).map_err(|msg| Error::Format { path: p.clone(), msg })?;
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Parameters of one store bound into a graph, either trainable (leaf
/// variables) or frozen (constants). Each name maps to a single node.
pub struct Bound<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: bool,
    cache: RefCell<HashMap<String, Var<'g>>>,
}

impl<'g, 's> Bound<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore, trainable: bool) -> Self {
        Bound {
            graph,
            store,
            trainable,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn trainable(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::new(graph, store, true)
    }

    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::new(graph, store, false)
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.cache.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.require(name)?.clone();
        let v = if self.trainable {
            self.graph.variable(t)
        } else {
            self.graph.constant(t)
        };
        self.cache.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every parameter of the store, zeros for unused ones.
    pub fn gradients(&self, grads: &Gradients) -> NamedGrads {
        let cache = self.cache.borrow();
        let mut out = NamedGrads::default();
        for (name, t) in self.store.iter() {
            let g = match cache.get(name) {
                Some(v) if self.trainable => grads.wrt(*v),
                _ => Tensor::zeros(t.shape()),
            };
            out.0.insert(name.to_string(), g);
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct NamedGrads(pub BTreeMap<String, Tensor>);

impl NamedGrads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &NamedGrads) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in &grads.0 {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Incompatible(format!("gradient for unknown parameter {name}")))?;
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *pi -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            if !p.is_finite() {
                return Err(Error::numerics("adam", format!("parameter {name} became non-finite")));
            }
        }
        Ok(())
    }
}
