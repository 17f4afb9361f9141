//! MLP feature extractor with an expandable cosine classifier head.
//!
//! The representation is the output of the final linear layer, *before* any
//! normalization; unit-sphere normalization happens only inside the cosine
//! head (and in embedding exports). Class logits are
//! `scale * cos(representation, w_c)` with one weight row per seen class
//! and a single learnable scale.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{l2_normalize_rows, DiffTensor, Graph};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::SplitMix64;

const NORM_EPS: f64 = 1e-12;

/// Architecture and initialization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_dim: usize,
    /// Hidden widths; empty means a single linear map input -> representation.
    pub hidden_dims: Vec<usize>,
    /// Representation dimension `d`; at least 2, since the covariance
    /// analysis needs a spectrum.
    pub representation_dim: usize,
    pub head_scale_init: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dim: 32,
            hidden_dims: vec![64],
            representation_dim: 32,
            head_scale_init: 16.0,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.representation_dim < 2 {
            return Err(Error::Config(format!(
                "representation_dim must be at least 2, got {}",
                self.representation_dim
            )));
        }
        if self.head_scale_init <= 0.0 {
            return Err(Error::Config(format!(
                "head_scale_init must be positive, got {}",
                self.head_scale_init
            )));
        }
        Ok(())
    }
}

/// One linear layer's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in x fan_out`.
    pub weight: Mat,
    pub bias: Vec<f64>,
}

/// The trainable network: feature layers, classifier rows, head scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    /// Hidden layers (each followed by ReLU) then the representation layer.
    pub layers: Vec<Layer>,
    /// One row per seen class, `C x d`. Starts empty; grows via
    /// [`Network::extend_head`].
    pub classifier: Mat,
    pub head_scale: f64,
    frozen: bool,
    /// Consumed when the head grows, so that freshly appended rows are
    /// deterministic but never repeat earlier draws.
    head_rng: SplitMix64,
}

/// Deep parameter copy for teachers, oracles and files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub network: Network,
}

fn he_uniform(rng: &mut SplitMix64, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Mat::from_vec(fan_in, fan_out, data).expect("sized to shape")
}

impl Network {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, scale at
    /// its configured initial value, empty head. Same seed, same bits.
    pub fn init(config: NetworkConfig) -> Result<Network> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let mut widths = vec![config.input_dim];
        widths.extend_from_slice(&config.hidden_dims);
        widths.push(config.representation_dim);
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            layers.push(Layer {
                weight: he_uniform(&mut rng, w[0], w[1]),
                bias: vec![0.0; w[1]],
            });
        }
        let head_rng = rng.derive(0x481D);
        Ok(Network {
            head_scale: config.head_scale_init,
            classifier: Mat::zeros(0, config.representation_dim),
            config,
            layers,
            frozen: false,
            head_rng,
        })
    }

    pub fn representation_dim(&self) -> usize {
        self.config.representation_dim
    }

    /// Number of classes currently represented in the head.
    pub fn seen_classes(&self) -> usize {
        self.classifier.rows()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Appends freshly He-initialized classifier rows; existing rows are
    /// untouched bit for bit.
    pub fn extend_head(&mut self, new_classes: usize) -> Result<()> {
        if self.frozen {
            return Err(Error::State("cannot extend a frozen network".into()));
        }
        if new_classes == 0 {
            return Ok(());
        }
        let d = self.config.representation_dim;
        let fresh = he_uniform(&mut self.head_rng, d, new_classes);
        // `fresh` is d x new_classes; rows of the classifier are per-class.
        let fresh_rows = fresh.transpose();
        let mut rows = Vec::with_capacity(self.classifier.rows() + new_classes);
        for i in 0..self.classifier.rows() {
            rows.push(self.classifier.row(i).to_vec());
        }
        for i in 0..fresh_rows.rows() {
            rows.push(fresh_rows.row(i).to_vec());
        }
        self.classifier = Mat::from_rows(&rows)?;
        Ok(())
    }

    /// Binds parameters as graph leaves and runs the forward pass, returning
    /// `(bound_parameters, representations, logits)`. The caller owns the
    /// graph; gradients land on the bound leaves after `backward`.
    pub fn forward(&self, g: &mut Graph, batch: &Mat) -> Result<(BoundParams, DiffTensor, DiffTensor)> {
        if batch.cols() != self.config.input_dim {
            return Err(Error::Dimension {
                op: "Network::forward",
                left: format!("{}x{}", batch.rows(), batch.cols()),
                right: format!("input_dim {}", self.config.input_dim),
            });
        }
        if self.seen_classes() == 0 {
            return Err(Error::State("forward pass before any head extension".into()));
        }
        let bound = self.bind(g)?;
        let x = g.leaf(batch)?;
        let (reps, logits) = self.forward_bound(g, &bound, x)?;
        Ok((bound, reps, logits))
    }

    fn bind(&self, g: &mut Graph) -> Result<BoundParams> {
        let mut layers = Vec::new();
        for layer in &self.layers {
            let w = g.leaf(&layer.weight)?;
            let b = g.leaf_from_parts(1, layer.bias.len(), layer.bias.clone())?;
            layers.push((w, b));
        }
        let classifier = g.leaf(&self.classifier)?;
        let scale = g.leaf_from_parts(1, 1, vec![self.head_scale])?;
        Ok(BoundParams {
            layers,
            classifier,
            scale,
        })
    }

    fn forward_bound(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        batch: DiffTensor,
    ) -> Result<(DiffTensor, DiffTensor)> {
        let mut h = batch;
        let last = bound.layers.len() - 1;
        for (i, (w, b)) in bound.layers.iter().enumerate() {
            let z = g.matmul(h, *w)?;
            let z = g.add_row_broadcast(z, *b)?;
            h = if i < last { g.relu(z)? } else { z };
        }
        let reps = h;
        let reps_n = l2_normalize_rows(g, reps, NORM_EPS)?;
        let w_n = l2_normalize_rows(g, bound.classifier, NORM_EPS)?;
        let w_t = g.transpose(w_n)?;
        let cos = g.matmul(reps_n, w_t)?;
        let logits = g.scale_by_scalar(cos, bound.scale)?;
        Ok((reps, logits))
    }

    /// Forward pass for evaluation: same computation as [`Network::forward`]
    /// on a throwaway graph, returning plain matrices.
    pub fn forward_eval(&self, batch: &Mat) -> Result<(Mat, Mat)> {
        let mut g = Graph::new();
        let (_, reps, logits) = self.forward(&mut g, batch)?;
        Ok((g.to_mat(reps), g.to_mat(logits)))
    }

    /// Representations only, for herding and spectra.
    pub fn representations(&self, batch: &Mat) -> Result<Mat> {
        let (reps, _) = self.forward_eval(batch)?;
        Ok(reps)
    }

    /// Applies `p -= delta` to every parameter. Velocity and learning-rate
    /// handling live in the engine; this is the raw in-place write.
    pub fn apply_update(&mut self, deltas: &ParamDeltas) -> Result<()> {
        if self.frozen {
            return Err(Error::State("cannot update a frozen network".into()));
        }
        for (layer, delta) in self.layers.iter_mut().zip(&deltas.layers) {
            for (w, d) in layer.weight.data_mut().iter_mut().zip(&delta.0) {
                *w -= d;
            }
            for (b, d) in layer.bias.iter_mut().zip(&delta.1) {
                *b -= d;
            }
        }
        for (w, d) in self.classifier.data_mut().iter_mut().zip(&deltas.classifier) {
            *w -= d;
        }
        self.head_scale -= deltas.scale;
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            network: self.clone(),
        }
    }
}

/// Graph leaves for one bound forward pass.
pub struct BoundParams {
    pub layers: Vec<(DiffTensor, DiffTensor)>,
    pub classifier: DiffTensor,
    pub scale: DiffTensor,
}

impl BoundParams {
    /// Collects the gradient of every parameter leaf, in declaration order.
    pub fn gradients(&self, g: &Graph) -> ParamDeltas {
        ParamDeltas {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (g.grad(*w).to_vec(), g.grad(*b).to_vec()))
                .collect(),
            classifier: g.grad(self.classifier).to_vec(),
            scale: g.grad(self.scale)[0],
        }
    }
}

/// Flat per-parameter increments (gradients or velocity steps).
#[derive(Debug, Clone)]
pub struct ParamDeltas {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub classifier: Vec<f64>,
    pub scale: f64,
}

impl ParamDeltas {
    pub fn zeros_like(net: &Network) -> ParamDeltas {
        ParamDeltas {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight.data().len()], vec![0.0; l.bias.len()]))
                .collect(),
            classifier: vec![0.0; net.classifier.data().len()],
            scale: 0.0,
        }
    }

    /// `self = momentum * self + grad`, then returns `lr * self` as the step.
    pub fn momentum_step(&mut self, grad: &ParamDeltas, momentum: f64, lr: f64) -> ParamDeltas {
        let mut step = ParamDeltas {
            layers: Vec::with_capacity(self.layers.len()),
            classifier: Vec::new(),
            scale: 0.0,
        };
        for ((vw, vb), (gw, gb)) in self.layers.iter_mut().zip(&grad.layers) {
            for (v, g) in vw.iter_mut().zip(gw) {
                *v = momentum * *v + g;
            }
            for (v, g) in vb.iter_mut().zip(gb) {
                *v = momentum * *v + g;
            }
            step.layers
                .push((vw.iter().map(|v| lr * v).collect(), vb.iter().map(|v| lr * v).collect()));
        }
        for (v, g) in self.classifier.iter_mut().zip(&grad.classifier) {
            *v = momentum * *v + g;
        }
        step.classifier = self.classifier.iter().map(|v| lr * v).collect();
        self.scale = momentum * self.scale + grad.scale;
        step.scale = lr * self.scale;
        step
    }
}

impl Snapshot {
    /// Restored networks are frozen by default; unfreeze explicitly to
    /// continue training.
    pub fn restore(&self) -> Network {
        let mut net = self.network.clone();
        net.frozen = true;
        net
    }

    pub fn restore_trainable(&self) -> Network {
        let mut net = self.network.clone();
        net.frozen = false;
        net
    }

    /// Writes the snapshot: a one-line JSON header with the config, then one
    /// line per parameter array with `f64` values as hex bit patterns, in
    /// declaration order. Bit-exact by construction.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header = serde_json::json!({
            "config": self.network.config,
            "head_scale": format!("{:016x}", self.network.head_scale.to_bits()),
            "frozen": self.network.frozen,
            "seen_classes": self.network.seen_classes(),
            "head_rng": self.network.head_rng_state(),
        });
        out.push_str(&header.to_string());
        out.push('\n');
        for layer in &self.network.layers {
            push_hex_line(&mut out, layer.weight.data());
            push_hex_line(&mut out, &layer.bias);
        }
        push_hex_line(&mut out, self.network.classifier.data());
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Snapshot> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header_line) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty snapshot file".into(),
        })?;
        let header: serde_json::Value =
            serde_json::from_str(header_line).map_err(|e| Error::Parse {
                line: 1,
                message: format!("bad snapshot header: {e}"),
            })?;
        let config: NetworkConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| Error::Parse {
                line: 1,
                message: format!("bad config in snapshot header: {e}"),
            })?;
        let head_scale = parse_hex_f64(header["head_scale"].as_str().unwrap_or(""), 1)?;
        let frozen = header["frozen"].as_bool().unwrap_or(true);
        let seen = header["seen_classes"].as_u64().unwrap_or(0) as usize;
        let head_rng_state = header["head_rng"].as_u64().ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing head_rng state".into(),
        })?;

        let mut net = Network::init(config)?;
        for layer_idx in 0..net.layers.len() {
            let (line_no, wline) = lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: "truncated snapshot".into(),
            })?;
            let weights = parse_hex_line(wline, line_no + 1)?;
            let shape = (net.layers[layer_idx].weight.rows(), net.layers[layer_idx].weight.cols());
            net.layers[layer_idx].weight = Mat::from_vec(shape.0, shape.1, weights)?;
            let (line_no, bline) = lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: "truncated snapshot".into(),
            })?;
            net.layers[layer_idx].bias = parse_hex_line(bline, line_no + 1)?;
        }
        let (line_no, cline) = lines.next().ok_or_else(|| Error::Parse {
            line: 0,
            message: "truncated snapshot".into(),
        })?;
        let cdata = parse_hex_line(cline, line_no + 1)?;
        let d = net.config.representation_dim;
        if cdata.len() != seen * d {
            return Err(Error::Parse {
                line: line_no + 1,
                message: format!("classifier has {} values, expected {}", cdata.len(), seen * d),
            });
        }
        net.classifier = Mat::from_vec(seen, d, cdata)?;
        net.head_scale = head_scale;
        net.frozen = frozen;
        net.head_rng = SplitMix64::new(head_rng_state);
        Ok(Snapshot { network: net })
    }
}

impl Network {
    /// The head RNG holds only its 64-bit state; snapshots carry it so a
    /// restored network extends its head identically to the original.
    fn head_rng_state(&self) -> u64 {
        self.head_rng.state()
    }
}

fn push_hex_line(out: &mut String, values: &[f64]) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        out.push_str(&format!("{:016x}", v.to_bits()));
        first = false;
    }
    if values.is_empty() {
        out.push('-');
    }
    out.push('\n');
}

fn parse_hex_line(line: &str, line_no: usize) -> Result<Vec<f64>> {
    if line == "-" {
        return Ok(Vec::new());
    }
    line.split(' ')
        .map(|tok| parse_hex_f64(tok, line_no))
        .collect()
}

fn parse_hex_f64(tok: &str, line_no: usize) -> Result<f64> {
    u64::from_str_radix(tok, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad f64 bit pattern {tok:?}"),
        })
}
