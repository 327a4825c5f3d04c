//! Predictor `f = h ∘ g`: an MLP featurizer with ReLU after every layer and
//! a linear softmax head, plus the temperature-scaled energy function.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{logsumexp, Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    pub temperature: f64,
    /// ID energies are pushed below this margin.
    pub m_in: f64,
    /// Pseudo-OOD energies are pushed above this margin.
    pub m_out: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            m_in: -10.0,
            m_out: -8.0,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.m_in < self.m_out) {
            return Err(Error::Config(format!(
                "energy margins need m_in < m_out, got {} and {}",
                self.m_in, self.m_out
            )));
        }
        Ok(())
    }
}

/// `E = −T · logsumexp(logits / T)`.
pub fn energy_of_logits(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    -temperature * logsumexp(&scaled)
}

/// Affine layer `y = x·Wᵀ + b` with `W` stored `out × in` and `b` as `1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(TensorError::Rank {
                op: "dense",
                rank: weight.shape().len(),
            }
            .into());
        }
        if bias.shape() != [1, weight.rows()] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            }
            .into());
        }
        Ok(Self { weight, bias })
    }

    /// He-style uniform init on `±sqrt(6 / fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::matrix(fan_out, fan_in, w).expect("sized"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.transpose()?)?.add_row(&self.bias)?)
    }

    pub fn bind(&self, g: &mut Graph) -> DenseVars {
        DenseVars {
            weight: g.param(self.weight.clone()),
            bias: g.param(self.bias.clone()),
        }
    }

    pub fn bind_constant(&self, g: &mut Graph) -> DenseVars {
        DenseVars {
            weight: g.constant(self.weight.clone()),
            bias: g.constant(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> std::result::Result<Var, TensorError> {
        let wt = g.transpose(self.weight)?;
        let y = g.matmul(x, wt)?;
        g.add(y, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub featurizer: Vec<Dense>,
    pub head: Dense,
}

/// Graph handles for every predictor parameter.
#[derive(Clone, Debug)]
pub struct PredictorVars {
    pub featurizer: Vec<DenseVars>,
    pub head: DenseVars,
}

impl PredictorVars {
    pub fn featurize(&self, g: &mut Graph, x: Var) -> std::result::Result<Var, TensorError> {
        featurize_graph(g, &self.featurizer, x)
    }

    /// Parameter handles in [`Predictor::params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.featurizer.iter().flat_map(|d| [d.weight, d.bias]).collect();
        out.extend([self.head.weight, self.head.bias]);
        out
    }
}

pub fn featurize_graph(g: &mut Graph, layers: &[DenseVars], x: Var) -> std::result::Result<Var, TensorError> {
    let mut h = x;
    for layer in layers {
        let a = layer.apply(g, h)?;
        h = g.relu(a)?;
    }
    Ok(h)
}

/// Logits of a (possibly masked) head. Columns with `keep[j] == false` are
/// filled with a large negative constant and carry no gradient.
pub fn logits_graph(
    g: &mut Graph,
    head: DenseVars,
    z: Var,
    keep: Option<&[bool]>,
) -> std::result::Result<Var, TensorError> {
    let l = head.apply(g, z)?;
    match keep {
        Some(mask) if mask.iter().any(|k| !k) => g.mask_cols(l, mask, crate::tolerances::MASKED_LOGIT),
        _ => Ok(l),
    }
}

/// Per-row energies as an `n × 1` column.
pub fn energy_graph(g: &mut Graph, logits: Var, temperature: f64) -> std::result::Result<Var, TensorError> {
    let scaled = g.scale(logits, 1.0 / temperature)?;
    let lse = g.logsumexp_rows(scaled)?;
    g.scale(lse, -temperature)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data).expect("sized")
}

/// Mean cross-entropy `−(1/n) Σ_i log softmax(l_i)[y_i]`.
pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> std::result::Result<Var, TensorError> {
    let classes = g.value(logits).cols();
    let n = labels.len();
    let lse = g.logsumexp_rows(logits)?;
    let log_probs = g.sub(logits, lse)?;
    let targets = g.constant(one_hot(labels, classes));
    let picked = g.mul(log_probs, targets)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / n as f64)
}

impl Predictor {
    /// Randomly initialized MLP featurizer with the given hidden widths.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], num_classes: usize, rng: &mut R) -> Self {
        let mut featurizer = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &w in hidden {
            featurizer.push(Dense::init(fan_in, w, rng));
            fan_in = w;
        }
        let head = Dense::init(fan_in, num_classes, rng);
        Self { featurizer, head }
    }

    pub fn from_parts(featurizer: Vec<Dense>, head: Dense) -> Result<Self> {
        let mut width = None;
        for layer in featurizer.iter().chain(std::iter::once(&head)) {
            if let Some(w) = width {
                if layer.in_dim() != w {
                    return Err(Error::Dimension {
                        what: "layer input",
                        expected: w,
                        actual: layer.in_dim(),
                    });
                }
            }
            width = Some(layer.out_dim());
        }
        Ok(Self { featurizer, head })
    }

    pub fn input_dim(&self) -> usize {
        self.featurizer.first().unwrap_or(&self.head).in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                what: "predictor input",
                expected: self.input_dim(),
                actual: x.cols(),
            });
        }
        Ok(())
    }

    pub fn featurize(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.featurizer {
            h = layer.apply(&h)?.relu();
        }
        Ok(h)
    }

    pub fn logits_from_features(&self, z: &Tensor) -> Result<Tensor> {
        self.head.apply(z)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_from_features(&self.featurize(x)?)
    }

    /// Class probabilities `softmax(logits)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.logits(x)?.softmax_rows()?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn energy(&self, x: &Tensor, temperature: f64) -> Result<Vec<f64>> {
        let l = self.logits(x)?;
        Ok((0..l.rows()).map(|i| energy_of_logits(l.row(i), temperature)).collect())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.featurizer.iter().flat_map(|d| [&d.weight, &d.bias]).collect();
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .featurizer
            .iter_mut()
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect();
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.featurizer.len() {
            out.push(format!("featurizer.{i}.weight"));
            out.push(format!("featurizer.{i}.bias"));
        }
        out.push("head.weight".into());
        out.push("head.bias".into());
        out
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> PredictorVars {
        PredictorVars {
            featurizer: self.featurizer.iter().map(|d| d.bind(g)).collect(),
            head: self.head.bind(g),
        }
    }

    /// Order-independent digest of the featurizer parameters' bit patterns.
    pub fn featurizer_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in &self.featurizer {
            for v in layer.weight.data().iter().chain(layer.bias.data()) {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Writes the versioned little-endian checkpoint format.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let names = self.param_names();
        let params = self.params();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, t) in names.iter().zip(params) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        if count < 2 || !count.is_multiple_of(2) {
            return Err(Error::Checkpoint(format!("{count} tensors do not form dense layers")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut layers = Vec::with_capacity(count / 2);
        let mut it = tensors.into_iter();
        while let (Some((wn, w)), Some((bn, b))) = (it.next(), it.next()) {
            if !wn.ends_with(".weight") || !bn.ends_with(".bias") {
                return Err(Error::Checkpoint(format!("unexpected tensor pair {wn}, {bn}")));
            }
            layers.push(Dense::new(w, b)?);
        }
        let head = layers.pop().expect("count ≥ 2");
        Self::from_parts(layers, head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        Ok(std::fs::write(path, buf)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MADODCKP";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
