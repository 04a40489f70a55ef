use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Owns the trainable variables of one model.
///
/// Layers are created zero-filled through [`ParamStore::builder`]; the values
/// are then drawn by [`ParamStore::init_seeded`], which keys a separate stream
/// on every variable name so initialization does not depend on creation order.
#[derive(Clone)]
pub struct ParamStore {
    varmap: VarMap,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("vars", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            varmap: VarMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_varmap(&self.varmap, self.dtype, &self.device)
    }

    pub fn len(&self) -> usize {
        self.varmap.data().lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().unwrap();
        let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().unwrap().get(name).cloned()
    }

    pub fn param_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Biases start at zero; weights are uniform with variance `1 / fan_in`,
    /// where `fan_in` is the product of all dimensions but the first.
    pub fn init_seeded(&self, seed: u64) -> Result<()> {
        for (name, var) in self.named_vars() {
            let dims = var.dims().to_vec();
            if name.ends_with("bias") || dims.len() < 2 {
                var.set(&var.zeros_like()?)?;
                continue;
            }
            let fan_in: usize = dims[1..].iter().product();
            let bound = (3.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&name));
            let values: Vec<f64> = (0..var.elem_count())
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let t = Tensor::from_vec(values, dims.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Snapshot of every variable as an owned tensor, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites variables from `tensors`; every variable must be present with a matching shape.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_vars() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: stored {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// FNV-1a, stable across runs and platforms.
pub(crate) fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn zeros(vb: &VarBuilder, shape: &[usize], name: &str) -> Result<Tensor> {
    Ok(vb.get_with_hints(shape, name, Init::Const(0.0))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible_and_order_free() {
        let dev = Device::Cpu;
        let a = ParamStore::new(DType::F32, &dev);
        let vb = a.builder();
        zeros(&vb, &[4, 3], "x.weight").unwrap();
        zeros(&vb, &[4], "x.bias").unwrap();
        zeros(&vb, &[2, 2, 3, 3], "y.weight").unwrap();
        a.init_seeded(5).unwrap();

        let b = ParamStore::new(DType::F32, &dev);
        let vb = b.builder();
        zeros(&vb, &[2, 2, 3, 3], "y.weight").unwrap();
        zeros(&vb, &[4, 3], "x.weight").unwrap();
        zeros(&vb, &[4], "x.bias").unwrap();
        b.init_seeded(5).unwrap();

        for ((na, ta), (nb, tb)) in a.snapshot().iter().zip(b.snapshot().iter()) {
            assert_eq!(na, nb);
            assert_eq!(
                ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                tb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
        assert_eq!(a.param_count(), 12 + 4 + 36);
        let bias = a.get("x.bias").unwrap();
        assert!(bias.to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dev = Device::Cpu;
        let a = ParamStore::new(DType::F32, &dev);
        zeros(&a.builder(), &[4, 3], "w").unwrap();
        let mut bad = BTreeMap::new();
        bad.insert("w".to_string(), Tensor::zeros((3, 4), DType::F32, &dev).unwrap());
        assert!(matches!(a.load(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(a.load(&BTreeMap::new()), Err(Error::Checkpoint(_))));
    }
}
