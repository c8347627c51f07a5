//! Named parameter storage, the Adam optimizer, and binary checkpoints.

use crate::nn::tensor::{NnError, Tensor};
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Leading bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LLCKPT01";

#[derive(Debug, Clone)]
struct Param {
    value: Tensor,
    /// Adam first-moment estimate.
    m: Tensor,
    /// Adam second-moment estimate.
    v: Tensor,
}

/// All trainable tensors of a model, keyed by name. Iteration is always in
/// name order, which keeps every update and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    adam_steps: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        if self.params.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.params.insert(name.to_string(), Param { value, m, v });
        Ok(())
    }

    /// Registers a tensor drawn uniformly from `±1/√fan_in`.
    pub fn init_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<(), NnError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    /// Mutable access to a parameter's value, e.g. to set a forget-gate bias
    /// after random initialization.
    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    /// One Adam update with bias correction. Parameters without a gradient
    /// entry are treated as having a zero gradient (their moments still
    /// decay). Non-finite gradients abort the step before touching anything.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<(), NnError> {
        for (name, grad) in grads {
            match self.params.get(name) {
                None => return Err(NnError::UnknownParam(name.clone())),
                Some(p) if p.value.shape() != grad.shape() => {
                    return Err(NnError::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.value.shape().to_vec(),
                        rhs: grad.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
            if grad.data().iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFinite(format!("gradient of {name}")));
            }
        }
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let m_corr = 1.0 - beta1.powi(t);
        let v_corr = 1.0 - beta2.powi(t);
        for (name, param) in self.params.iter_mut() {
            let zero;
            let grad = match grads.get(name) {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; param.value.len()];
                    &zero
                }
            };
            for i in 0..param.value.len() {
                let g = grad[i];
                let m = beta1 * param.m.data()[i] + (1.0 - beta1) * g;
                let v = beta2 * param.v.data()[i] + (1.0 - beta2) * g * g;
                param.m.data_mut()[i] = m;
                param.v.data_mut()[i] = v;
                let m_hat = m / m_corr;
                let v_hat = v / v_corr;
                param.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Serializes parameter values (not optimizer state) to the checkpoint
    /// wire format: magic, count, then per parameter the name, the shape,
    /// and raw little-endian f64 data. Bit-exact by construction.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, param) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(param.value.shape().len() as u32).to_le_bytes());
            for &dim in param.value.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &x in param.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`serialize`](Self::serialize). Optimizer moments restart
    /// at zero: a loaded model resumes training as if freshly initialized
    /// around the stored weights.
    pub fn deserialize(bytes: &[u8]) -> Result<Self, NnError> {
        let mut reader = Reader { bytes, pos: 0 };
        let magic = reader.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let count = reader.take_u32()?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = reader.take_u32()? as usize;
            let name = std::str::from_utf8(reader.take(name_len)?)
                .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = reader.take_u32()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(NnError::Checkpoint(format!(
                    "parameter {name:?} has implausible rank {ndim}"
                )));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(reader.take_u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(
                    reader.take(8)?.try_into().expect("eight bytes"),
                ));
            }
            set.insert(&name, Tensor::new(&shape, data)?)?;
        }
        if reader.pos != bytes.len() {
            return Err(NnError::Checkpoint(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - reader.pos
            )));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        Ok(std::fs::write(path, self.serialize())?)
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::deserialize(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four")))
    }

    fn take_u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grads_of(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        map.insert(name.to_string(), t);
        map
    }

    #[test]
    fn zero_learning_rate_and_zero_gradients_change_nothing() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::new(&[2], vec![1.5, -0.5]).unwrap())
            .unwrap();
        let g = grads_of("w", Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
        params.adam_step(&g, 0.0, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(params.get("w").unwrap().data(), [1.5, -0.5]);
        assert_eq!(params.adam_steps(), 1);

        // From a fresh state (zero moments), zero gradients move nothing
        // even with a real learning rate.
        let mut fresh = ParamSet::new();
        fresh
            .insert("w", Tensor::new(&[2], vec![1.5, -0.5]).unwrap())
            .unwrap();
        let zeros = grads_of("w", Tensor::zeros(&[2]));
        fresh.adam_step(&zeros, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(fresh.get("w").unwrap().data(), [1.5, -0.5]);
    }

    #[test]
    fn adam_drives_a_quadratic_toward_its_minimum() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::new(&[1], vec![1.0]).unwrap())
            .unwrap();
        let mut first_step = None;
        for _ in 0..60 {
            let w = params.get("w").unwrap().data()[0];
            let g = grads_of("w", Tensor::new(&[1], vec![2.0 * w]).unwrap());
            params.adam_step(&g, 0.1, 0.9, 0.999, 1e-8).unwrap();
            first_step.get_or_insert(params.get("w").unwrap().data()[0]);
        }
        // Bias correction makes the very first step ≈ lr in magnitude.
        assert!((first_step.unwrap() - 0.9).abs() < 1e-6);
        assert!(params.get("w").unwrap().data()[0].abs() < 0.2);
    }

    #[test]
    fn missing_gradient_entries_mean_zero_but_unknown_names_error() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::zeros(&[2])).unwrap();
        params
            .insert("b", Tensor::new(&[1], vec![4.0]).unwrap())
            .unwrap();
        let g = grads_of("b", Tensor::new(&[1], vec![1.0]).unwrap());
        params.adam_step(&g, 0.5, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(params.get("a").unwrap().data(), [0.0, 0.0]);
        assert!(params.get("b").unwrap().data()[0] < 4.0);

        let bad = grads_of("ghost", Tensor::zeros(&[1]));
        assert!(matches!(
            params.adam_step(&bad, 0.5, 0.9, 0.999, 1e-8),
            Err(NnError::UnknownParam(_))
        ));
        let nan = grads_of("b", Tensor::new(&[1], vec![f64::NAN]).unwrap());
        assert!(matches!(
            params.adam_step(&nan, 0.5, 0.9, 0.999, 1e-8),
            Err(NnError::NonFinite(_))
        ));
    }

    #[test]
    fn checkpoints_roundtrip_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        params.init_uniform("gen.w", &[7, 3], 7, &mut rng).unwrap();
        params
            .insert(
                "odd/values",
                Tensor::new(&[4], vec![-0.0, f64::MIN_POSITIVE, 1e300, -1e-300]).unwrap(),
            )
            .unwrap();
        let bytes = params.serialize();
        let restored = ParamSet::deserialize(&bytes).unwrap();
        assert_eq!(restored.len(), params.len());
        for name in params.names() {
            let a = params.get(name).unwrap();
            let b = restored.get(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} drifted");
            }
        }
        assert_eq!(restored.adam_steps(), 0);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        let good = params.serialize();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            ParamSet::deserialize(&bad_magic),
            Err(NnError::Checkpoint(_))
        ));

        let truncated = &good[..good.len() - 5];
        assert!(matches!(
            ParamSet::deserialize(truncated),
            Err(NnError::Checkpoint(_))
        ));

        let mut padded = good.clone();
        padded.push(0);
        assert!(matches!(
            ParamSet::deserialize(&padded),
            Err(NnError::Checkpoint(_))
        ));
    }

    #[test]
    fn file_roundtrip_and_init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamSet::new();
        params.init_uniform("w", &[16, 4], 16, &mut rng).unwrap();
        let bound = 1.0 / 4.0;
        assert!(params
            .get("w")
            .unwrap()
            .data()
            .iter()
            .all(|x| x.abs() <= bound));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        params.save(&path).unwrap();
        let restored = ParamSet::load(&path).unwrap();
        assert_eq!(
            restored.get("w").unwrap().data(),
            params.get("w").unwrap().data()
        );

        assert!(matches!(
            params.insert("w", Tensor::zeros(&[1])),
            Err(NnError::DuplicateParam(_))
        ));
    }
}
