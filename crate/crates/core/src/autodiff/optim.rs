//! Named parameter storage and first-order optimizers.
//!
//! Parameters live in a [`ParamSet`] keyed by dotted names (`"enc.w"`,
//! `"pu.0.gru.b"`).  The map is ordered, so iteration, checksums and
//! checkpoints are deterministic regardless of registration order.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use sha2::{Digest, Sha256};

use super::EngineError;
use crate::Scalar;

/// One tensor plus its gradient slot and Adam moment estimates.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Array2<T>,
    pub grad: Option<Array2<T>>,
    pub m: Array2<T>,
    pub v: Array2<T>,
}

/// Adam hyper-parameters.  Defaults are the standard ones used everywhere in
/// the harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar> {
    entries: BTreeMap<String, Param<T>>,
    /// Number of optimizer steps taken (drives Adam bias correction).
    pub step: u64,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    /// Register a tensor under a fresh name.
    pub fn insert(&mut self, name: &str, value: Array2<T>) -> Result<(), EngineError> {
        if self.entries.contains_key(name) {
            return Err(EngineError::DuplicateParam(name.to_string()));
        }
        let dim = value.dim();
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                m: Array2::zeros(dim),
                v: Array2::zeros(dim),
            },
        );
        Ok(())
    }

    /// Register a `rows x cols` tensor drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<(), EngineError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| {
            T::from_f64(rng.gen_range(-bound..bound))
        });
        self.insert(name, value)
    }

    /// Register a zero tensor (biases).
    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<(), EngineError> {
        self.insert(name, Array2::zeros((rows, cols)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Array2<T>, EngineError> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| EngineError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>, EngineError> {
        self.entries
            .get(name)
            .ok_or_else(|| EngineError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>, EngineError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| EngineError::UnknownParam(name.to_string()))
    }

    /// Iterate `(name, param)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Add a gradient contribution (from [`super::Tape::harvest`]).
    pub fn accumulate_grad(&mut self, name: &str, g: &Array2<T>) -> Result<(), EngineError> {
        let p = self.get_mut(name)?;
        match p.grad.as_mut() {
            Some(existing) => *existing += g,
            None => p.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Global L2 norm of all gradients.  Errors if any entry is missing or
    /// non-finite, so a diverged step is caught before it poisons the weights.
    pub fn grad_norm(&self) -> Result<f64, EngineError> {
        let mut acc = 0.0f64;
        for (name, p) in self.entries.iter() {
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| EngineError::MissingGrad(name.clone()))?;
            for v in g.iter() {
                let v = v.as_f64();
                acc += v * v;
            }
        }
        if !acc.is_finite() {
            return Err(EngineError::NonFinite { context: "gradient norm".to_string() });
        }
        Ok(acc.sqrt())
    }

    /// Scale all gradients so their global norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> Result<f64, EngineError> {
        let norm = self.grad_norm()?;
        if norm > max_norm && norm > 0.0 {
            let scale = T::from_f64(max_norm / norm);
            for p in self.entries.values_mut() {
                if let Some(g) = p.grad.as_mut() {
                    g.mapv_inplace(|v| v * scale);
                }
            }
        }
        Ok(norm)
    }

    /// One Adam update with bias correction.  Every parameter must have a
    /// gradient; partial updates are a wiring bug, not a state to optimize in.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), EngineError> {
        for (name, p) in self.entries.iter() {
            if p.grad.is_none() {
                return Err(EngineError::MissingGrad(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
        let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
        let one = T::one();
        for p in self.entries.values_mut() {
            let g = p.grad.as_ref().expect("checked above");
            ndarray::Zip::from(&mut p.m).and(g).for_each(|m, &gv| {
                *m = b1 * *m + (one - b1) * gv;
            });
            ndarray::Zip::from(&mut p.v).and(g).for_each(|v, &gv| {
                *v = b2 * *v + (one - b2) * gv * gv;
            });
            ndarray::Zip::from(&mut p.value)
                .and(&p.m)
                .and(&p.v)
                .for_each(|w, &m, &v| {
                    let mhat = m / c1;
                    let vhat = v / c2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }

    /// Plain gradient descent (used by small tests and the gradient checker's
    /// sanity path).
    pub fn sgd_step(&mut self, lr: f64) -> Result<(), EngineError> {
        for (name, p) in self.entries.iter() {
            if p.grad.is_none() {
                return Err(EngineError::MissingGrad(name.clone()));
            }
        }
        self.step += 1;
        let lr = T::from_f64(lr);
        for p in self.entries.values_mut() {
            let g = p.grad.as_ref().expect("checked above");
            ndarray::Zip::from(&mut p.value).and(g).for_each(|w, &gv| {
                *w = *w - lr * gv;
            });
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian value bytes, in name
    /// order.  Two sets with identical parameters produce identical digests.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in self.entries.iter() {
            hasher.update(name.as_bytes());
            hasher.update((p.value.nrows() as u64).to_le_bytes());
            hasher.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", array![[1.0]]).unwrap();
        assert!(matches!(
            ps.insert("w", array![[2.0]]).unwrap_err(),
            EngineError::DuplicateParam(_)
        ));
    }

    #[test]
    fn adam_single_step_matches_hand_recursion() {
        // One weight 1.0, gradient 0.5, lr=0.1, defaults otherwise:
        //   m1 = 0.1*0.5 = 0.05          (after beta1 blend)
        //   v1 = 0.001*0.25 = 0.00025
        //   mhat = 0.05/(1-0.9) = 0.5
        //   vhat = 0.00025/(1-0.999) = 0.25
        //   w = 1 - 0.1*0.5/(sqrt(0.25)+1e-8) = 1 - 0.1*0.999999980...
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", array![[1.0]]).unwrap();
        ps.accumulate_grad("w", &array![[0.5]]).unwrap();
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        ps.adam_step(&cfg).unwrap();
        let w = ps.value("w").unwrap()[(0, 0)];
        let expect = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + 1e-8));
        assert!((w - expect).abs() < 1e-15, "{w} vs {expect}");
        assert_eq!(ps.step, 1);
    }

    #[test]
    fn adam_two_steps_match_independent_recursion() {
        // Quadratic loss L = 0.5*w^2 so grad = w; recompute the Adam
        // recursion in a standalone loop and compare trajectories.
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", array![[2.0]]).unwrap();
        let mut w_ref = 2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = ps.value("w").unwrap()[(0, 0)];
            ps.zero_grads();
            ps.accumulate_grad("w", &array![[g]]).unwrap();
            ps.adam_step(&cfg).unwrap();

            let g_ref = w_ref;
            m = 0.9 * m + 0.1 * g_ref;
            v = 0.999 * v + 0.001 * g_ref * g_ref;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            w_ref -= 0.05 * mhat / (vhat.sqrt() + 1e-8);
            let w = ps.value("w").unwrap()[(0, 0)];
            assert!((w - w_ref).abs() < 1e-14, "step {t}: {w} vs {w_ref}");
        }
    }

    #[test]
    fn adam_rejects_missing_gradient() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("a", array![[1.0]]).unwrap();
        ps.insert("b", array![[1.0]]).unwrap();
        ps.accumulate_grad("a", &array![[1.0]]).unwrap();
        let err = ps.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(matches!(err, EngineError::MissingGrad(name) if name == "b"));
    }

    #[test]
    fn clip_rescales_to_the_requested_norm() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", array![[0.0, 0.0]]).unwrap();
        ps.accumulate_grad("w", &array![[3.0, 4.0]]).unwrap();
        let pre = ps.clip_grad_norm(1.0).unwrap();
        assert!((pre - 5.0).abs() < 1e-12);
        let g = ps.get("w").unwrap().grad.as_ref().unwrap().clone();
        let post = (g[(0, 0)].powi(2) + g[(0, 1)].powi(2)).sqrt();
        assert!((post - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::<f64>::new();
        ps.init_uniform("w", 16, 16, 64, &mut rng).unwrap();
        let bound = 1.0 / 8.0;
        for v in ps.value("w").unwrap().iter() {
            assert!(v.abs() <= bound);
        }
    }

    #[test]
    fn checksum_is_order_independent_and_value_sensitive() {
        let mut a = ParamSet::<f64>::new();
        a.insert("x", array![[1.0]]).unwrap();
        a.insert("y", array![[2.0]]).unwrap();
        let mut b = ParamSet::<f64>::new();
        b.insert("y", array![[2.0]]).unwrap();
        b.insert("x", array![[1.0]]).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        b.get_mut("x").unwrap().value[(0, 0)] = 1.5;
        assert_ne!(a.checksum(), b.checksum());
    }
}
