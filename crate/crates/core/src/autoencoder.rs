//! Dense autoencoder with a two-layer linear bottleneck, trained by ADAM.
//!
//! Weight matrices are stored `fan_in x fan_out`, row-major, and a layer
//! computes `y = act(x W + b)` on row-vector inputs. With this layout every
//! row of a bottleneck matrix is one point of the 2D weight plane.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::dataset::{batches, Dataset};
use crate::drift::{AdamHyper, AdamState, RowUpdateSample};
use crate::rng::{stream, INIT};
use crate::{Error, Result};

/// Variance of the bottleneck weights at initialization.
pub const BOTTLENECK_INIT_VARIANCE: f64 = 0.5;

/// Samples per forward pass when evaluating the loss over a whole dataset.
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }

    fn apply(self, z: &mut [f64]) {
        match self {
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => z.iter_mut().for_each(|v| *v = libm::tanh(*v)),
            Activation::Sigmoid => z.iter_mut().for_each(|v| *v = 1.0 / (1.0 + libm::exp(-*v))),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the output `a`.
    fn backprop(self, a: &[f64], grad: &mut [f64]) {
        match self {
            Activation::Relu => grad.iter_mut().zip(a).for_each(|(g, &a)| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.iter_mut().zip(a).for_each(|(g, &a)| *g *= 1.0 - a * a),
            Activation::Sigmoid => grad.iter_mut().zip(a).for_each(|(g, &a)| *g *= a * (1.0 - a)),
            Activation::Identity => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub input_dim: usize,
    /// Widths after the input; the last one feeds the bottleneck.
    pub encoder_hidden: Vec<usize>,
    /// Widths between the bottleneck and the output layer.
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub output_activation: Activation,
    pub bottleneck_bias: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            input_dim: 784,
            encoder_hidden: vec![256, 200],
            decoder_hidden: vec![256],
            activation: Activation::Relu,
            output_activation: Activation::Sigmoid,
            bottleneck_bias: false,
        }
    }
}

pub const LATENT_DIM: usize = 2;

/// Snapshot ids of the two bottleneck layers.
pub const BOTTLENECK_LAYERS: [u32; 2] = [1, 2];

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&w| w == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    /// Width of the representation entering the first bottleneck layer.
    pub fn encoder_dim(&self) -> usize {
        self.encoder_hidden.last().copied().unwrap_or(self.input_dim)
    }

    /// `(fan_in, fan_out, activation, bias)` for every layer in order.
    fn layer_shapes(&self) -> Vec<(usize, usize, Activation, bool)> {
        let mut out = Vec::new();
        let mut prev = self.input_dim;
        for &w in &self.encoder_hidden {
            out.push((prev, w, self.activation, true));
            prev = w;
        }
        out.push((prev, LATENT_DIM, Activation::Identity, self.bottleneck_bias));
        out.push((LATENT_DIM, LATENT_DIM, Activation::Identity, self.bottleneck_bias));
        prev = LATENT_DIM;
        for &w in &self.decoder_hidden {
            out.push((prev, w, self.activation, true));
            prev = w;
        }
        out.push((prev, self.input_dim, self.output_activation, true));
        out
    }

    /// Layer index of bottleneck layer `id` (1 or 2).
    pub fn bottleneck_index(&self, id: u32) -> Result<usize> {
        match id {
            1 | 2 => Ok(self.encoder_hidden.len() + id as usize - 1),
            _ => Err(Error::invalid(format!("no bottleneck layer {id}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: ArchSpec,
    pub layers: Vec<Layer>,
}

/// `c = op(a) op(b) + beta c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements whose presence the assertion checks.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Activations of every layer for one batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub batch: usize,
    /// `outputs[l]` is the output of layer `l`; the last one is the reconstruction.
    pub outputs: Vec<Vec<f64>>,
    b1: usize,
}

impl ForwardPass {
    pub fn reconstruction(&self) -> &[f64] {
        self.outputs.last().expect("network has layers")
    }

    /// Outputs of bottleneck layer 1 and 2, `batch x 2` each.
    pub fn latents(&self) -> [&[f64]; 2] {
        [&self.outputs[self.b1], &self.outputs[self.b1 + 1]]
    }

    /// The representation fed into the first bottleneck layer, if the
    /// encoder has hidden layers.
    pub fn encoder_output(&self) -> Option<&[f64]> {
        self.b1.checked_sub(1).map(|l| self.outputs[l].as_slice())
    }
}

/// Gradient of the loss for every layer, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Option<Vec<f64>>>,
}

impl Network {
    /// Random initialization: bottleneck weights i.i.d. N(0, 1/2), other
    /// weights fan-in scaled Gaussian, biases zero.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let b1 = arch.bottleneck_index(1)?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(l, (fan_in, fan_out, activation, bias))| {
                let var = if l == b1 || l == b1 + 1 {
                    BOTTLENECK_INIT_VARIANCE
                } else if activation == Activation::Relu {
                    2.0 / fan_in as f64
                } else {
                    1.0 / fan_in as f64
                };
                let normal = Normal::new(0.0, libm::sqrt(var)).expect("positive variance");
                let mut rng = stream(seed, INIT, l as u64);
                Layer {
                    fan_in,
                    fan_out,
                    weights: (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect(),
                    bias: bias.then(|| vec![0.0; fan_out]),
                    activation,
                }
            })
            .collect();
        Ok(Self { arch, layers })
    }

    /// All weights and biases zero.
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out, activation, bias)| Layer {
                fan_in,
                fan_out,
                weights: vec![0.0; fan_in * fan_out],
                bias: bias.then(|| vec![0.0; fan_out]),
                activation,
            })
            .collect();
        Ok(Self { arch, layers })
    }

    pub fn bottleneck(&self, id: u32) -> Result<&Layer> {
        Ok(&self.layers[self.arch.bottleneck_index(id)?])
    }

    pub fn bottleneck_mut(&mut self, id: u32) -> Result<&mut Layer> {
        let l = self.arch.bottleneck_index(id)?;
        Ok(&mut self.layers[l])
    }

    pub fn forward(&self, input: &[f64], batch: usize) -> Result<ForwardPass> {
        if batch == 0 || input.len() != batch * self.arch.input_dim {
            return Err(Error::invalid(format!(
                "input of length {} is not {batch} rows of {}",
                input.len(),
                self.arch.input_dim
            )));
        }
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = outputs.last().map_or(input, |v| v.as_slice());
            let mut z = match &layer.bias {
                Some(b) => {
                    let mut z = Vec::with_capacity(batch * layer.fan_out);
                    for _ in 0..batch {
                        z.extend_from_slice(b);
                    }
                    z
                }
                None => vec![0.0; batch * layer.fan_out],
            };
            gemm(batch, layer.fan_in, layer.fan_out, x, false, &layer.weights, false, 1.0, &mut z);
            layer.activation.apply(&mut z);
            outputs.push(z);
        }
        Ok(ForwardPass { batch, outputs, b1: self.arch.encoder_hidden.len() })
    }

    /// Mean squared reconstruction error over all `batch * input_dim` entries.
    pub fn loss(&self, input: &[f64], batch: usize) -> Result<f64> {
        let fp = self.forward(input, batch)?;
        Ok(mse(fp.reconstruction(), input))
    }

    /// Exact gradients of the mean squared reconstruction loss.
    pub fn backward(&self, input: &[f64], batch: usize) -> Result<Gradients> {
        let fp = self.forward(input, batch)?;
        let out = fp.reconstruction();
        let scale = 2.0 / out.len() as f64;
        let mut delta: Vec<f64> = out.iter().zip(input).map(|(o, x)| scale * (o - x)).collect();
        let nl = self.layers.len();
        let mut weights = vec![Vec::new(); nl];
        let mut biases = vec![None; nl];
        for l in (0..nl).rev() {
            let layer = &self.layers[l];
            layer.activation.backprop(&fp.outputs[l], &mut delta);
            let x = if l == 0 { input } else { &fp.outputs[l - 1] };
            let mut gw = vec![0.0; layer.fan_in * layer.fan_out];
            gemm(layer.fan_in, batch, layer.fan_out, x, true, &delta, false, 0.0, &mut gw);
            weights[l] = gw;
            if layer.bias.is_some() {
                let mut gb = vec![0.0; layer.fan_out];
                for row in delta.chunks_exact(layer.fan_out) {
                    gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
                biases[l] = Some(gb);
            }
            if l > 0 {
                let mut prev = vec![0.0; batch * layer.fan_in];
                gemm(batch, layer.fan_out, layer.fan_in, &delta, false, &layer.weights, true, 0.0, &mut prev);
                delta = prev;
            }
        }
        Ok(Gradients { loss: mse(out, input), weights, biases })
    }

    /// Loss over a whole dataset, evaluated in chunks.
    pub fn dataset_loss(&self, data: &Dataset) -> Result<f64> {
        let d = data.dim();
        let mut total = 0.0;
        let mut buf = Vec::new();
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            buf.resize(chunk.len() * d, 0.0);
            data.gather(chunk, &mut buf);
            total += self.loss(&buf, chunk.len())? * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// Encoder outputs (inputs of bottleneck layer 1), `batch x encoder_dim`.
    pub fn encode(&self, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        let fp = self.forward(input, batch)?;
        Ok(fp.encoder_output().map_or_else(|| input.to_vec(), |h| h.to_vec()))
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: u32,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 0, batch_size: 64, epochs: 80, adam: AdamHyper::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        self.adam.validate()
    }
}

/// Frozen bottleneck matrix with its optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub epoch: u32,
    pub layer_id: u32,
    pub rows: usize,
    pub cols: usize,
    pub matrix: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub epoch_loss: f64,
}

impl WeightSnapshot {
    pub fn row(&self, r: usize) -> [f64; 2] {
        [self.matrix[r * self.cols], self.matrix[r * self.cols + 1]]
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        (0..self.rows).map(|r| self.row(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochResult {
    pub epoch: u32,
    /// Mean of the per-batch losses, weighted by batch size.
    pub loss: f64,
    pub snapshots: Vec<WeightSnapshot>,
    /// Net displacement of each bottleneck row, per bottleneck layer.
    pub row_updates: Vec<Vec<RowUpdateSample>>,
}

#[derive(Debug, Clone)]
struct LayerAdam {
    w: AdamState,
    b: Option<AdamState>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub network: Network,
    pub config: TrainConfig,
    adam: Vec<LayerAdam>,
    epochs_done: u32,
    last_loss: f64,
}

impl Trainer {
    pub fn new(arch: ArchSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = Network::init(arch, config.seed)?;
        Self::from_network(network, config)
    }

    pub fn from_network(network: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = network
            .layers
            .iter()
            .map(|l| {
                Ok(LayerAdam {
                    w: AdamState::new(l.weights.len(), config.adam)?,
                    b: l.bias.as_ref().map(|b| AdamState::new(b.len(), config.adam)).transpose()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { network, config, adam, epochs_done: 0, last_loss: f64::NAN })
    }

    pub fn epochs_done(&self) -> u32 {
        self.epochs_done
    }

    /// Snapshot of bottleneck layer `id` as it stands now.
    pub fn snapshot(&self, id: u32, epoch_loss: f64) -> Result<WeightSnapshot> {
        let l = self.network.arch.bottleneck_index(id)?;
        let layer = &self.network.layers[l];
        Ok(WeightSnapshot {
            epoch: self.epochs_done,
            layer_id: id,
            rows: layer.fan_in,
            cols: layer.fan_out,
            matrix: layer.weights.clone(),
            adam_m: self.adam[l].w.m.clone(),
            adam_v: self.adam[l].w.v.clone(),
            epoch_loss,
        })
    }

    /// One pass over `data` in the seeded shuffle order of the next epoch.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochResult> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if data.dim() != self.network.arch.input_dim {
            return Err(Error::invalid(format!(
                "images have {} pixels, network expects {}",
                data.dim(),
                self.network.arch.input_dim
            )));
        }
        let epoch = self.epochs_done + 1;
        let b_idx = BOTTLENECK_LAYERS.map(|id| self.network.arch.bottleneck_index(id).expect("valid id"));
        let start: Vec<Vec<f64>> = b_idx.iter().map(|&l| self.network.layers[l].weights.clone()).collect();
        let mut moved: Vec<Vec<f64>> = start.iter().map(|w| vec![0.0; w.len()]).collect();

        let d = data.dim();
        let mut buf = Vec::new();
        let mut update = Vec::new();
        let mut loss_sum = 0.0;
        for batch in batches(data.len(), self.config.batch_size, self.config.seed, u64::from(epoch))? {
            buf.resize(batch.len() * d, 0.0);
            data.gather(&batch, &mut buf);
            let grads = self.network.backward(&buf, batch.len())?;
            if !grads.loss.is_finite() {
                return Err(Error::degenerate(format!("loss diverged in epoch {epoch}")));
            }
            loss_sum += grads.loss * batch.len() as f64;
            for (l, (layer, st)) in self.network.layers.iter_mut().zip(&mut self.adam).enumerate() {
                update.resize(layer.weights.len(), 0.0);
                st.w.step(&grads.weights[l], &mut update)?;
                layer.weights.iter_mut().zip(&update).for_each(|(w, u)| *w += u);
                if let Some(k) = b_idx.iter().position(|&b| b == l) {
                    moved[k].iter_mut().zip(&update).for_each(|(m, u)| *m += u);
                }
                if let (Some(b), Some(sb), Some(gb)) = (&mut layer.bias, &mut st.b, &grads.biases[l]) {
                    update.resize(b.len(), 0.0);
                    sb.step(gb, &mut update)?;
                    b.iter_mut().zip(&update).for_each(|(w, u)| *w += u);
                }
            }
        }
        self.epochs_done = epoch;
        let loss = loss_sum / data.len() as f64;
        self.last_loss = loss;

        let row_updates = start
            .iter()
            .zip(&moved)
            .map(|(w, m)| {
                w.chunks_exact(LATENT_DIM)
                    .zip(m.chunks_exact(LATENT_DIM))
                    .map(|(p, u)| RowUpdateSample {
                        position: [p[0], p[1]],
                        update: [u[0], u[1]],
                        epoch_time: f64::from(epoch - 1),
                    })
                    .collect()
            })
            .collect();
        let snapshots = BOTTLENECK_LAYERS.iter().map(|&id| self.snapshot(id, loss)).collect::<Result<_>>()?;
        log::debug!("epoch {epoch}: loss {loss:.6}");
        Ok(EpochResult { epoch, loss, snapshots, row_updates })
    }
}
