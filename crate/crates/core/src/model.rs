//! Multilayer-perceptron softmax classifier and its checkpoint format.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! "SDIC" | version u32 | input_dim u32 | hidden count u32 | widths u32[]
//!        | num_classes u32 | epoch u32 | seed u64
//!        | per layer: weight f64[out*in] (row-major), bias f64[out]
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDIC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
}

/// Layer widths of an MLP classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden,
            num_classes,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Domain("layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Domain(format!(
                "need at least two classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// `(in, out)` per affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Weight `[out × in]` and bias `[out]` of one affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All trainable parameters, input layer first.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            layers: spec
                .layer_dims()
                .into_iter()
                .map(|(i, o)| Layer {
                    weight: Tensor::zeros(&[o, i]),
                    bias: Tensor::zeros(&[o]),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    /// Tensors in `[w0, b0, w1, b1, ...]` order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_tensors(&self) -> usize {
        self.layers.len() * 2
    }

    /// Checks that the layers chain and match `spec`.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let dims = spec.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "{} layers for a spec with {}",
                self.layers.len(),
                dims.len()
            )));
        }
        for (layer, (i, o)) in self.layers.iter().zip(dims) {
            if layer.weight.shape() != [o, i] || layer.bias.shape() != [o] {
                return Err(Error::Dimension(format!(
                    "layer {:?}/{:?} where {o}x{i} expected",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<(Var, Var)>> {
        self.layers
            .iter()
            .map(|l| {
                if trainable {
                    Ok((tape.leaf(l.weight.clone())?, tape.leaf(l.bias.clone())?))
                } else {
                    Ok((
                        tape.constant(l.weight.clone())?,
                        tape.constant(l.bias.clone())?,
                    ))
                }
            })
            .collect()
    }
}

/// He-normal weights (std `sqrt(2 / fan_in)`) and zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::zeros(spec);
    for layer in &mut params.layers {
        let fan_in = layer.weight.shape()[1] as f64;
        let std = (2.0 / fan_in).sqrt();
        for w in layer.weight.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = std * z;
        }
    }
    params
}

/// Affine → ReLU chain with an affine head, recorded on `tape`.
pub fn forward_on_tape(tape: &mut Tape, layers: &[(Var, Var)], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul_nt(h, w)?;
        h = tape.add_bias(z, b)?;
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

fn check_input(params: &ParamSet, x: &Tensor) -> Result<()> {
    let (_, d) = x.as_matrix_dims()?;
    if d != params.input_dim() {
        return Err(Error::Dimension(format!(
            "input width {d}, model expects {}",
            params.input_dim()
        )));
    }
    Ok(())
}

/// Logits `[batch × C]` for inputs `[batch × d]`.
pub fn forward_logits(params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    check_input(params, x)?;
    let mut tape = Tape::new();
    let layers = params.record(&mut tape, false)?;
    let xv = tape.constant(x.clone())?;
    let out = forward_on_tape(&mut tape, &layers, xv)?;
    Ok(tape.value(out).clone())
}

/// Row-wise class probabilities.
pub fn forward_probs(params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    softmax_rows(&forward_logits(params, x)?)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Predicted class per row of `x`.
pub fn predict(params: &ParamSet, x: &Tensor) -> Result<Vec<usize>> {
    let logits = forward_logits(params, x)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

/// Trained model plus the bookkeeping needed to reproduce it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub seed: u64,
    pub epoch: u32,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_against(&self.spec)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let put = |out: &mut Vec<u8>, v: usize| -> Result<()> {
            let v = u32::try_from(v)
                .map_err(|_| Error::Domain(format!("{v} does not fit in a u32 header")))?;
            out.extend_from_slice(&v.to_le_bytes());
            Ok(())
        };
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put(&mut out, self.spec.input_dim)?;
        put(&mut out, self.spec.hidden.len())?;
        for &w in &self.spec.hidden {
            put(&mut out, w)?;
        }
        put(&mut out, self.spec.num_classes)?;
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses checkpoint bytes; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "bad magic, not a checkpoint"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let input_dim = r.u32("input_dim")? as usize;
        let hidden_count = r.u32("hidden count")? as usize;
        if hidden_count > r.remaining() / 4 {
            return Err(Error::format(
                origin,
                "header: hidden count exceeds file size",
            ));
        }
        let hidden = (0..hidden_count)
            .map(|_| r.u32("hidden width").map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let num_classes = r.u32("num_classes")? as usize;
        let epoch = r.u32("epoch")?;
        let seed = u64::from_le_bytes(r.take(8, "seed")?.try_into().expect("8 bytes"));
        let spec = ModelSpec::new(input_dim, hidden, num_classes)
            .map_err(|e| Error::format(origin, format!("header: {e}")))?;

        let expected: usize = spec.layer_dims().iter().map(|(i, o)| o * i + o).sum();
        if r.remaining() != expected * 8 {
            return Err(Error::format(
                origin,
                format!(
                    "header promises {expected} parameters but {} payload bytes follow",
                    r.remaining()
                ),
            ));
        }
        let mut params = ParamSet::zeros(&spec);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(r.take(8, "parameters")?.try_into().expect("8 bytes"));
            }
        }
        Ok(Self {
            spec,
            params,
            seed,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.origin,
                format!("header truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}
