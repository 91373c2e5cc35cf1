//! Feedforward Q-network with rectifier hidden layers, Adam, and a
//! little-endian checkpoint format.
//!
//! Checkpoint layout: magic `STGQ`, `u32` version, `u32` layer-size count,
//! that many `u32` sizes, `u64` seed, `u64` episode count, then every
//! layer's weights (row-major, out x in) followed by its biases as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use thiserror::Error;

pub const INPUTS: usize = 10;
pub const ACTIONS: usize = 8;
pub const DEFAULT_SIZES: [usize; 5] = [INPUTS, 200, 200, 200, ACTIONS];

const MAGIC: &[u8; 4] = b"STGQ";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum QNetError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("expected input of length {expected}, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QNetError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out x in
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub layers: Vec<Dense>,
}

/// Per-layer parameter gradients, same shapes as the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

/// Metadata stored alongside checkpoint parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub episodes: u64,
}

impl QNetwork {
    /// Uniform fan-in initialization: U(-1/sqrt(in), 1/sqrt(in)).
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_fn((w[1], w[0]), |_| rng.gen_range(-bound..bound)),
                    bias: Array1::from_shape_fn(w[1], |_| rng.gen_range(-bound..bound)),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].weights.ncols()];
        sizes.extend(self.layers.iter().map(|l| l.weights.nrows()));
        sizes
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map(|l| l.weights.nrows()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_len() {
            return Err(QNetError::InputLength {
                expected: self.input_len(),
                got: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(QNetError::NonFinite("network input"));
        }
        let mut a = Array1::from_vec(input.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.dot(&a) + &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        Ok(a.to_vec())
    }

    /// Rows of `inputs` are samples.
    pub fn forward_batch(&self, inputs: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(inputs)
            .pop()
            .expect("at least one layer")
    }

    /// Activations after every layer, input first.
    fn forward_cached(&self, inputs: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = vec![inputs.clone()];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights.t()) + &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Squared-error loss on the selected outputs, averaged over the batch.
    pub fn loss(&self, inputs: &Array2<f64>, actions: &[usize], targets: &[f64]) -> f64 {
        let out = self.forward_batch(inputs);
        let n = actions.len() as f64;
        actions
            .iter()
            .zip(targets)
            .enumerate()
            .map(|(i, (&a, &y))| (out[[i, a]] - y).powi(2))
            .sum::<f64>()
            / n
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        inputs: &Array2<f64>,
        actions: &[usize],
        targets: &[f64],
    ) -> (f64, Gradients) {
        let acts = self.forward_cached(inputs);
        let out = acts.last().expect("output");
        let n = actions.len() as f64;
        let mut delta = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for (i, (&a, &y)) in actions.iter().zip(targets).enumerate() {
            let err = out[[i, a]] - y;
            loss += err * err;
            delta[[i, a]] = 2.0 * err / n;
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let prev = &acts[i];
            grads.push(Dense {
                weights: delta.t().dot(prev),
                bias: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut back = delta.dot(&layer.weights);
                back.zip_mut_with(prev, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        (loss / n, Gradients { layers: grads })
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn from_flat(sizes: &[usize], params: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(sizes);
        if params.len() != net.param_count() {
            return Err(QNetError::Checkpoint(format!(
                "expected {} parameters, found {}",
                net.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut net.layers {
            l.weights
                .iter_mut()
                .for_each(|w| *w = it.next().expect("sized"));
            l.bias
                .iter_mut()
                .for_each(|b| *b = it.next().expect("sized"));
        }
        Ok(net)
    }

    pub fn write_checkpoint<W: Write>(&self, meta: CheckpointMeta, mut out: W) -> Result<()> {
        let sizes = self.sizes();
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for s in &sizes {
            out.write_all(&(*s as u32).to_le_bytes())?;
        }
        out.write_all(&meta.seed.to_le_bytes())?;
        out.write_all(&meta.episodes.to_le_bytes())?;
        for v in self.flatten() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(Self, CheckpointMeta)> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(QNetError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(QNetError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let count = read_u32(&mut input)? as usize;
        if !(2..=64).contains(&count) {
            return Err(QNetError::Checkpoint(format!(
                "implausible layer count {count}"
            )));
        }
        let sizes = (0..count)
            .map(|_| read_u32(&mut input).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
            return Err(QNetError::Checkpoint("implausible layer size".into()));
        }
        let seed = read_u64(&mut input)?;
        let episodes = read_u64(&mut input)?;
        let total: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut bytes = vec![0u8; total * 8];
        input.read_exact(&mut bytes)?;
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let net = Self::from_flat(&sizes, &params)?;
        if !net.is_finite() {
            return Err(QNetError::NonFinite("checkpoint parameters"));
        }
        Ok((net, CheckpointMeta { seed, episodes }))
    }

    pub fn save(&self, meta: CheckpointMeta, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_checkpoint(meta, std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Adam with the usual decay constants.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(net: &QNetwork, learning_rate: f64) -> Self {
        let zeros = QNetwork::zeros(&net.sizes()).layers;
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, net: &mut QNetwork, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = QNetwork::zeros(&DEFAULT_SIZES);
        assert_eq!(net.forward(&[0.3; 10]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn identity_slice_returns_weight_column() {
        let mut net = QNetwork::zeros(&[3, 2]);
        net.layers[0].weights = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(net.forward(&[0.0, 1.0, 0.0]).unwrap(), vec![2.0, 5.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = QNetwork::zeros(&DEFAULT_SIZES);
        assert!(matches!(
            net.forward(&[f64::NAN; 10]),
            Err(QNetError::NonFinite(_))
        ));
        assert!(matches!(
            net.forward(&[0.0; 3]),
            Err(QNetError::InputLength { .. })
        ));
    }

    #[test]
    fn param_count_matches_architecture() {
        let net = QNetwork::zeros(&DEFAULT_SIZES);
        assert_eq!(
            net.param_count(),
            10 * 200 + 200 + 2 * (200 * 200 + 200) + 200 * 8 + 8
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = QNetwork::new(&[10, 7, 8], &mut ChaCha8Rng::seed_from_u64(3));
        let meta = CheckpointMeta {
            seed: 42,
            episodes: 400,
        };
        let mut buf = Vec::new();
        net.write_checkpoint(meta, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"STGQ");
        let (back, meta2) = QNetwork::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta2, meta);
        assert!(QNetwork::read_checkpoint(&buf[..20]).is_err());
    }

    #[test]
    fn gradient_step_reduces_single_sample_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = QNetwork::new(&[10, 16, 16, 8], &mut rng);
        let x = Array2::from_shape_fn((1, 10), |_| rng.gen_range(-1.0..1.0));
        let before = net.loss(&x, &[3], &[2.5]);
        let (_, grads) = net.loss_and_gradients(&x, &[3], &[2.5]);
        let mut adam = Adam::new(&net, 1e-4);
        adam.apply(&mut net, &grads);
        assert!(net.loss(&x, &[3], &[2.5]) < before);
    }
}
