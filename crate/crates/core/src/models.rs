//! ReLU multilayer perceptrons with hand-written forward and backward passes.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "NKDM"
//! format       u32      1
//! version      u64      parameter version tag
//! input_dim    u32
//! num_classes  u32
//! num_hidden   u32
//! hidden_dims  u32 x num_hidden
//! per layer l, in order:
//!   weight     f64 x (fan_in * fan_out), row-major, fan_in rows
//!   bias       f64 x fan_out
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

const MAGIC: &[u8; 4] = b"NKDM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            hidden_dims,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidParameter(
                "all layer widths must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    layers: Vec<Layer>,
    version: u64,
}

/// He-style init: `N(0, 2 / fan_in)` weights, zero biases.
pub fn init_params(spec: &ModelSpec, rng: &mut SeededRng) -> Result<ModelParams> {
    spec.validate()?;
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.normal(0.0, std))
                .collect();
            Ok(Layer {
                weight: Matrix::from_vec(fan_in, fan_out, data)?,
                bias: vec![0.0; fan_out],
            })
        })
        .collect::<Result<_>>()?;
    Ok(ModelParams {
        spec: spec.clone(),
        layers,
        version: 0,
    })
}

impl ModelParams {
    pub fn from_layers(spec: ModelSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::dim(format!(
                "spec has {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, (layer, &(fan_in, fan_out))) in layers.iter().zip(&shapes).enumerate() {
            if layer.weight.shape() != (fan_in, fan_out) || layer.bias.len() != fan_out {
                return Err(Error::dim(format!(
                    "layer {i}: expected {fan_in}x{fan_out} weight and {fan_out} biases"
                )));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::InvalidInput(format!("layer {i}: non-finite bias")));
            }
        }
        Ok(ModelParams {
            spec,
            layers,
            version: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for optimizers. Bumps the version tag so caches from
    /// earlier forward passes are rejected by [`backward`].
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`ModelParams::to_flat`].
    pub fn with_flat(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (r, c) = l.weight.shape();
            let weight = Matrix::from_vec(r, c, flat[offset..offset + r * c].to_vec())?;
            offset += r * c;
            let bias = flat[offset..offset + c].to_vec();
            offset += c;
            layers.push(Layer { weight, bias });
        }
        let mut p = ModelParams::from_layers(self.spec.clone(), layers)?;
        p.version = self.version;
        Ok(p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.spec.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.hidden_dims.len() as u32).to_le_bytes());
        for &h in &self.spec.hidden_dims {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        for v in self.to_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<ModelParams> {
        let mut r = ByteReader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad checkpoint magic"));
        }
        let format = r.u32()?;
        if format != FORMAT_VERSION {
            return Err(r.error(4, &format!("unsupported checkpoint format {format}")));
        }
        let version = r.u64()?;
        let input_dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let num_hidden = r.u32()? as usize;
        let hidden_dims = (0..num_hidden)
            .map(|_| Ok(r.u32()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec::new(input_dim, hidden_dims, num_classes)?;
        let count: usize = spec.layer_shapes().iter().map(|(i, o)| i * o + o).sum();
        let flat = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes after parameters"));
        }
        let template = ModelParams {
            layers: spec
                .layer_shapes()
                .iter()
                .map(|&(i, o)| Layer {
                    weight: Matrix::zeros(i, o),
                    bias: vec![0.0; o],
                })
                .collect(),
            spec,
            version,
        };
        template.with_flat(&flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the checkpoint bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub origin: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn error(&self, offset: u64, message: &str) -> Error {
        Error::Format {
            path: self.origin.to_path_buf(),
            offset,
            message: message.to_string(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error(
                self.pos as u64,
                &format!(
                    "truncated: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let at = self.pos as u64;
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(self.error(at, "non-finite parameter value"));
        }
        Ok(v)
    }
}

/// Intermediate values kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    params_version: u64,
    /// Input to each layer (`inputs` first, then post-ReLU activations).
    layer_inputs: Vec<Matrix>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn affine(x: &Matrix, layer: &Layer) -> Result<Matrix> {
    let mut z = x.matmul(&layer.weight)?;
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    z.check_finite()
        .map_err(|e| Error::Numeric(format!("forward pass: {e}")))?;
    Ok(z)
}

/// Logits for a batch of inputs plus the cache needed by [`backward`].
pub fn forward(params: &ModelParams, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if inputs.cols() != params.spec.input_dim {
        return Err(Error::dim(format!(
            "model expects {} inputs, batch has {}",
            params.spec.input_dim,
            inputs.cols()
        )));
    }
    let n = params.layers.len();
    let mut layer_inputs = Vec::with_capacity(n);
    let mut pre_activations = Vec::with_capacity(n - 1);
    let mut x = inputs.clone();
    for layer in &params.layers[..n - 1] {
        let z = affine(&x, layer)?;
        let a = z.map(|v| v.max(0.0))?;
        layer_inputs.push(x);
        pre_activations.push(z);
        x = a;
    }
    let logits = affine(&x, &params.layers[n - 1])?;
    layer_inputs.push(x);
    Ok((
        logits,
        ForwardCache {
            params_version: params.version,
            layer_inputs,
            pre_activations,
        },
    ))
}

/// Logits only.
pub fn predict(params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    Ok(forward(params, inputs)?.0)
}

/// Parameter gradients given `dL/dlogits`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    d_logits: &Matrix,
) -> Result<ParamGrads> {
    if cache.params_version != params.version {
        return Err(Error::Contract(format!(
            "forward cache from parameter version {} used with version {}",
            cache.params_version, params.version
        )));
    }
    let batch = cache.layer_inputs[0].rows();
    if d_logits.shape() != (batch, params.spec.num_classes) {
        return Err(Error::dim(format!(
            "upstream gradient {}x{}, expected {}x{}",
            d_logits.rows(),
            d_logits.cols(),
            batch,
            params.spec.num_classes
        )));
    }
    let n = params.layers.len();
    let mut grads = Vec::with_capacity(n);
    let mut delta = d_logits.clone();
    for l in (0..n).rev() {
        let weight = cache.layer_inputs[l].matmul_tn(&delta)?;
        let mut bias = vec![0.0; delta.cols()];
        for row in delta.row_iter() {
            for (b, d) in bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        grads.push(LayerGrad { weight, bias });
        if l > 0 {
            let mut upstream = delta.matmul_nt(&params.layers[l].weight)?;
            let pre = &cache.pre_activations[l - 1];
            for (g, &z) in upstream.data_mut().iter_mut().zip(pre.data()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            delta = upstream;
        }
    }
    grads.reverse();
    Ok(ParamGrads { layers: grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, relative_error};
    use crate::losses::{ce_loss, LabelBatch};

    fn rand_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let spec = ModelSpec::new(2, vec![4], 3).unwrap();
        let a = init_params(&spec, &mut SeededRng::new(9)).unwrap();
        let b = init_params(&spec, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.layers()[0].weight.shape(), (2, 4));
        assert_eq!(a.layers()[1].weight.shape(), (4, 3));
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));

        let linear = ModelSpec::new(5, vec![], 3).unwrap();
        let p = init_params(&linear, &mut SeededRng::new(1)).unwrap();
        assert_eq!(p.layers().len(), 1);
        assert_eq!(p.layers()[0].weight.shape(), (5, 3));
    }

    #[test]
    fn invalid_specs() {
        assert!(ModelSpec::new(3, vec![], 1).is_err());
        assert!(ModelSpec::new(0, vec![], 2).is_err());
        assert!(ModelSpec::new(3, vec![4, 0], 2).is_err());
    }

    #[test]
    fn zero_and_identity_models() {
        let spec = ModelSpec::new(2, vec![], 2).unwrap();
        let zero = ModelParams::from_layers(
            spec.clone(),
            vec![Layer {
                weight: Matrix::zeros(2, 2),
                bias: vec![0.0; 2],
            }],
        )
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [3.0, -2.0]]).unwrap();
        let logits = predict(&zero, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));

        let ident = ModelParams::from_layers(
            spec,
            vec![Layer {
                weight: Matrix::identity(2),
                bias: vec![0.0; 2],
            }],
        )
        .unwrap();
        let logits = predict(&ident, &Matrix::row_vector(&[1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(logits.row(0), &[1.0, 0.0]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_straight_line_oracle() {
        let spec = ModelSpec::new(3, vec![5, 4], 3).unwrap();
        let mut rng = SeededRng::new(2);
        let p = init_params(&spec, &mut rng).unwrap();
        let p = p
            .with_flat(
                &p.to_flat()
                    .iter()
                    .map(|v| v + rng.normal(0.0, 0.1))
                    .collect::<Vec<_>>(),
            )
            .unwrap();
        let x = rand_matrix(&mut rng, 6, 3);
        let logits = predict(&p, &x).unwrap();
        for r in 0..6 {
            let mut h: Vec<f64> = x.row(r).to_vec();
            for (li, layer) in p.layers().iter().enumerate() {
                let (fi, fo) = layer.weight.shape();
                let mut next = vec![0.0; fo];
                for j in 0..fo {
                    let mut acc = layer.bias[j];
                    for i in 0..fi {
                        acc += h[i] * layer.weight.get(i, j);
                    }
                    next[j] = if li + 1 < p.layers().len() {
                        acc.max(0.0)
                    } else {
                        acc
                    };
                }
                h = next;
            }
            for c in 0..3 {
                assert!((h[c] - logits.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let spec = ModelSpec::new(3, vec![4], 2).unwrap();
        let mut rng = SeededRng::new(3);
        let p = init_params(&spec, &mut rng).unwrap();
        let x = rand_matrix(&mut rng, 5, 3);
        let (_, cache) = forward(&p, &x).unwrap();
        let g = backward(&p, &cache, &Matrix::zeros(5, 2)).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_ce_weight_grad_closed_form() {
        let spec = ModelSpec::new(3, vec![], 4).unwrap();
        let mut rng = SeededRng::new(4);
        let p = init_params(&spec, &mut rng).unwrap();
        let x = rand_matrix(&mut rng, 6, 3);
        let labels = LabelBatch::one_hot(&[0, 1, 2, 3, 0, 1], 4).unwrap();
        let (logits, cache) = forward(&p, &x).unwrap();
        let ce = ce_loss(&logits, &labels).unwrap();
        let g = backward(&p, &cache, &ce.grad).unwrap();
        // inputsᵀ (S - V) / B, built independently
        let s = crate::numerics::softmax_temp(&logits, 1.0).unwrap();
        let resid = s.sub(labels.values()).unwrap().scale(1.0 / 6.0).unwrap();
        let expected = x.transpose().matmul(&resid).unwrap();
        assert!(g.layers[0].weight.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        for hidden in [vec![], vec![6], vec![5, 4], vec![4, 3, 5]] {
            let spec = ModelSpec::new(4, hidden, 10).unwrap();
            let p = init_params(&spec, &mut rng).unwrap();
            let p = p
                .with_flat(
                    &p.to_flat()
                        .iter()
                        .map(|v| v + rng.normal(0.0, 0.05))
                        .collect::<Vec<_>>(),
                )
                .unwrap();
            let x = rand_matrix(&mut rng, 5, 4);
            let classes: Vec<usize> = (0..5).map(|_| rng.below(10)).collect();
            let labels = LabelBatch::one_hot(&classes, 10).unwrap();
            let (logits, cache) = forward(&p, &x).unwrap();
            let ce = ce_loss(&logits, &labels).unwrap();
            let analytic = backward(&p, &cache, &ce.grad).unwrap().to_flat();
            let numeric = numeric_gradient(
                |flat| Ok(ce_loss(&predict(&p.with_flat(flat)?, &x)?, &labels)?.loss),
                &p.to_flat(),
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&analytic, &numeric) < 1e-4);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = ModelSpec::new(2, vec![3], 2).unwrap();
        let mut p = init_params(&spec, &mut SeededRng::new(6)).unwrap();
        let x = Matrix::row_vector(&[1.0, 2.0]).unwrap();
        let (_, cache) = forward(&p, &x).unwrap();
        p.layers_mut();
        assert!(matches!(
            backward(&p, &cache, &Matrix::zeros(1, 2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let spec = ModelSpec::new(3, vec![4, 2], 5).unwrap();
        let mut p = init_params(&spec, &mut SeededRng::new(7)).unwrap();
        p.layers_mut();
        let bytes = p.to_bytes();
        let q = ModelParams::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.digest(), q.digest());

        let err = ModelParams::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ModelParams::from_bytes(&bad, Path::new("mem")),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
