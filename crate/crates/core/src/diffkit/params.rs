//! Named parameter collections bridging model code and the optimizer.
//!
//! Models describe their trainable state as named matrices (the same names
//! as the graph input leaves). The fitting loop needs a flat `Vec<f64>` for
//! ADAM. A [`ParamSet`] holds the named arrays in insertion order so the
//! flattening is deterministic.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use super::Bindings;

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Array2<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a named parameter. Names must be unique within the set.
    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate parameter name '{name}'"
        );
        self.entries.push((name.to_string(), value));
    }

    pub fn insert_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, Array2::from_elem((1, 1), value));
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .1
    }

    pub fn scalar(&self, name: &str) -> f64 {
        self.get(name)[[0, 0]]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Total number of scalar parameters.
    pub fn dim(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Flatten all parameters in insertion order, each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (_, a) in &self.entries {
            out.extend(a.iter().copied());
        }
        out
    }

    /// Inverse of [`to_flat`].
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.dim(), "flat vector length mismatch");
        let mut offset = 0;
        for (_, a) in &mut self.entries {
            for v in a.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
    }

    /// Copy every parameter into graph bindings under its own name.
    pub fn bind(&self, bindings: &mut Bindings) {
        for (n, a) in &self.entries {
            bindings.set(n, a.clone());
        }
    }

    /// Flatten a gradient map in this set's order; parameters without an
    /// entry in the map get zeros.
    pub fn flat_grads(&self, grads: &HashMap<String, Array2<f64>>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (n, a) in &self.entries {
            match grads.get(n) {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat(0.0).take(a.len())),
            }
        }
        out
    }
}

/// Glorot/Xavier uniform initialization: entries uniform on
/// +-sqrt(6 / (fan_in + fan_out)) where fan_in is the row count and fan_out
/// the column count of a weight matrix applied as `x @ W`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_round_trip_preserves_order_and_values() {
        let mut p = ParamSet::new();
        p.insert("b", array![[1.0, 2.0], [3.0, 4.0]]);
        p.insert_scalar("a", 5.0);
        let flat = p.to_flat();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut q = p.clone();
        q.set_from_flat(&[9.0, 8.0, 7.0, 6.0, 5.5]);
        assert_eq!(q.get("b")[[1, 0]], 7.0);
        assert_eq!(q.scalar("a"), 5.5);
        assert_eq!(p.get("b")[[0, 0]], 1.0, "original untouched");
    }

    #[test]
    fn glorot_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = glorot_uniform(20, 10, &mut rng);
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(w.iter().any(|v| v.abs() > bound * 0.5), "spread should fill the range");
    }
}
