use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};

use super::{BatchStats, Scalar, Tape, Tensor, Var};

/// Named parameter tensors, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: &str, value: Tensor<F>) {
        match self.index.get(name) {
            Some(&i) => self.entries[i].1 = value,
            None => self.insert(name, value).expect("name is new"),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies every entry whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(name, t.clone()).expect("names are unique");
        }
        out
    }

    pub fn extend(&mut self, other: &ParamStore<F>) -> Result<()> {
        for (name, t) in other.iter() {
            self.insert(name, t.clone())?;
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Moves `<name>.mean` and `<name>.var` toward recorded batch statistics.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<F>], momentum: f64) -> Result<()> {
        let m = F::lit(momentum);
        for s in stats {
            for (field, batch) in [("mean", &s.mean), ("var", &s.var)] {
                let key = format!("{}.{field}", s.name);
                let t = self.get_mut(&key).ok_or_else(|| Error::Invalid(format!("no running statistic `{key}`")))?;
                if t.numel() != batch.len() {
                    return shape_err(format!("`{key}` holds {} values, batch gave {}", t.numel(), batch.len()));
                }
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (F::one() - m) * *r + m * b;
                }
            }
        }
        Ok(())
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let vars = self.entries.iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Gradients after `tape.backward`, aligned with insertion order.
    pub fn gradients(&self, tape: &Tape<F>, bound: &Bound) -> Vec<Option<Vec<F>>> {
        bound.vars.iter().map(|&v| tape.grad(v).map(<[F]>::to_vec)).collect()
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
