//! Conversion between in-memory parameters and named bundle tensors.
//!
//! Matrices are stored as `1 x rows x cols`, vectors as `1 x 1 x len`.

use ndarray::{Array1, Array2};

use crate::datamodel::{FeatureMap, ModelBundle};
use crate::error::{Error, Result};
use crate::gmm::{GmmHead, VAR_FLOOR};
use crate::neural::{Activation, DenseLayer, Mlp};
use crate::scalar::Real;

pub(crate) fn matrix_tensor<T: Real>(m: &Array2<T>) -> Result<FeatureMap<f32>> {
    FeatureMap::new(
        1,
        m.nrows(),
        m.ncols(),
        m.iter().map(|v| v.to_f32_lossy()).collect(),
    )
}

pub(crate) fn vector_tensor<T: Real>(v: impl IntoIterator<Item = T>) -> Result<FeatureMap<f32>> {
    let data: Vec<f32> = v.into_iter().map(|x| x.to_f32_lossy()).collect();
    FeatureMap::new(1, 1, data.len(), data)
}

fn tensor_matrix<T: Real>(t: &FeatureMap<f32>, name: &str) -> Result<Array2<T>> {
    if t.channels() != 1 {
        return Err(Error::InvalidBundle(format!("{name} must have a single channel")));
    }
    Array2::from_shape_vec(
        (t.height(), t.width()),
        t.data().iter().map(|&v| T::from_f32_exact(v)).collect(),
    )
    .map_err(|e| Error::InvalidBundle(format!("{name}: {e}")))
}

fn tensor_vector<T: Real>(t: &FeatureMap<f32>, name: &str, len: usize) -> Result<Vec<T>> {
    if t.channels() != 1 || t.height() != 1 || t.width() != len {
        return Err(Error::InvalidBundle(format!(
            "{name} has shape {}x{}x{}, expected 1x1x{len}",
            t.channels(),
            t.height(),
            t.width()
        )));
    }
    Ok(t.data().iter().map(|&v| T::from_f32_exact(v)).collect())
}

pub(crate) fn insert_layer<T: Real>(bundle: &mut ModelBundle, prefix: &str, layer: &DenseLayer<T>) -> Result<()> {
    bundle.insert(format!("{prefix}.weight"), matrix_tensor(&layer.weights)?)?;
    bundle.insert(format!("{prefix}.bias"), vector_tensor(layer.bias.iter().copied())?)
}

pub(crate) fn read_layer<T: Real>(bundle: &ModelBundle, prefix: &str, activation: Activation) -> Result<DenseLayer<T>> {
    let wname = format!("{prefix}.weight");
    let weights: Array2<T> = tensor_matrix(bundle.tensor(&wname)?, &wname)?;
    let bname = format!("{prefix}.bias");
    let bias = tensor_vector(bundle.tensor(&bname)?, &bname, weights.nrows())?;
    DenseLayer::from_parts(weights, Array1::from(bias), activation)
}

pub(crate) fn insert_mlp<T: Real>(bundle: &mut ModelBundle, prefix: &str, mlp: &Mlp<T>) -> Result<()> {
    for (i, layer) in mlp.layers().iter().enumerate() {
        insert_layer(bundle, &format!("{prefix}.{i}"), layer)?;
    }
    Ok(())
}

/// Reads `prefix.0`, `prefix.1`, ... until a layer is missing.
pub(crate) fn read_mlp<T: Real>(
    bundle: &ModelBundle,
    prefix: &str,
    hidden: Activation,
    output: Activation,
) -> Result<Mlp<T>> {
    let mut n = 0;
    while bundle.tensor(&format!("{prefix}.{n}.weight")).is_ok() {
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidBundle(format!("no layers under {prefix}")));
    }
    let layers = (0..n)
        .map(|i| {
            let act = if i + 1 == n { output } else { hidden };
            read_layer(bundle, &format!("{prefix}.{i}"), act)
        })
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_layers(layers)
}

pub(crate) fn insert_gmm<T: Real>(bundle: &mut ModelBundle, prefix: &str, head: &GmmHead<T>) -> Result<()> {
    for k in 0..head.classes() {
        for c in 0..head.components() {
            let p = format!("{prefix}.{k}.{c}");
            bundle.insert(format!("{p}.mean"), vector_tensor(head.mean(k, c).iter().copied())?)?;
            bundle.insert(format!("{p}.var"), vector_tensor(head.var(k, c).iter().copied())?)?;
            bundle.insert(format!("{p}.weight"), vector_tensor([head.weight(k, c)])?)?;
        }
    }
    Ok(())
}

pub(crate) fn read_gmm<T: Real>(
    bundle: &ModelBundle,
    prefix: &str,
    classes: usize,
    components: usize,
    dim: usize,
) -> Result<GmmHead<T>> {
    let mut means = Vec::with_capacity(classes * components * dim);
    let mut vars = Vec::with_capacity(classes * components * dim);
    let mut weights = Vec::with_capacity(classes * components);
    for k in 0..classes {
        for c in 0..components {
            let p = format!("{prefix}.{k}.{c}");
            for (suffix, len, out) in [("mean", dim, &mut means), ("var", dim, &mut vars), ("weight", 1, &mut weights)] {
                let name = format!("{p}.{suffix}");
                out.extend(tensor_vector::<T>(bundle.tensor(&name)?, &name, len)?);
            }
        }
    }
    // A variance sitting on the floor rounds to just below it in f32.
    let floor = T::lit(VAR_FLOOR);
    vars.iter_mut().for_each(|v| *v = v.max(floor));
    // f32 storage can move a weight sum off 1 by an ulp; renormalize.
    for k in 0..classes {
        let w = &mut weights[k * components..(k + 1) * components];
        let s: T = w.iter().copied().sum();
        w.iter_mut().for_each(|v| *v /= s);
    }
    GmmHead::new(classes, components, dim, means, vars, weights)
}
