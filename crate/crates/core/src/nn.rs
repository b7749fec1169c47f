//! Dense -> single-layer LSTM -> dense frame classifier with exact
//! backpropagation through time.
//!
//! All parameters live in one flat `Vec<f64>` laid out as
//! `Wx (4h x d, row-major) | Wh (4h x h) | b (4h) | Wo (o x h) | bo (o)`.
//! The `4h` gate rows are ordered input, forget, cell candidate, output.
//! A [`FlatGradient`] uses exactly the same layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RandomSource;

pub const NETWORK_MAGIC: &[u8; 8] = b"FDPNET01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetworkDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl NetworkDims {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::Shape(format!(
                "network dims must be >= 1, got {input_dim}x{hidden_dim}x{output_dim}"
            )));
        }
        Ok(Self { input_dim, hidden_dim, output_dim })
    }

    /// `4h(d + h + 1) + o(h + 1)`.
    pub fn parameter_count(&self) -> usize {
        let (d, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        4 * h * (d + h + 1) + o * (h + 1)
    }

    fn layout(&self) -> Layout {
        let (d, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        let wx = 0;
        let wh = wx + 4 * h * d;
        let b = wh + 4 * h * h;
        let wo = b + 4 * h;
        let bo = wo + o * h;
        Layout { wx, wh, b, wo, bo, end: bo + o }
    }
}

impl std::fmt::Display for NetworkDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.input_dim, self.hidden_dim, self.output_dim)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    wx: usize,
    wh: usize,
    b: usize,
    wo: usize,
    bo: usize,
    end: usize,
}

/// Flat vector of partial derivatives in the network's parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient(Vec<f64>);

impl FlatGradient {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    dims: NetworkDims,
    params: Vec<f64>,
}

/// Everything [`Network::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: NetworkDims,
    fingerprint: u64,
    steps: usize,
    inputs: Vec<f64>,
    /// Activated gates per step, `4h` each: i, f, g, o.
    gates: Vec<f64>,
    cells: Vec<f64>,
    cell_tanh: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Softmax outputs, `steps x output_dim`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// FNV-1a over the parameter bit patterns.
fn fingerprint(params: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for byte in p.to_bits().to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl Network {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in))` weights drawn in layout
    /// order (`Wx`, `Wh`, `Wo`); biases zero except the forget-gate bias,
    /// which starts at 1.
    pub fn init(dims: NetworkDims, rng: &mut RandomSource) -> Self {
        let lay = dims.layout();
        let h = dims.hidden_dim;
        let mut params = vec![0.0; lay.end];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = a * (2.0 * rng.uniform() - 1.0);
            }
        };
        fill(lay.wx..lay.wh, dims.input_dim);
        fill(lay.wh..lay.b, h);
        fill(lay.wo..lay.bo, h);
        for p in &mut params[lay.b + h..lay.b + 2 * h] {
            *p = 1.0;
        }
        Self { dims, params }
    }

    pub fn zeros(dims: NetworkDims) -> Self {
        Self { params: vec![0.0; dims.parameter_count()], dims }
    }

    /// Rebuilds a network from a flat parameter vector in the documented layout.
    pub fn from_flat(dims: NetworkDims, params: Vec<f64>) -> Result<Self> {
        if params.len() != dims.parameter_count() {
            return Err(Error::Shape(format!(
                "{} parameters supplied for a {dims} network ({} expected)",
                params.len(),
                dims.parameter_count()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidValue("non-finite network parameter".into()));
        }
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> NetworkDims {
        self.dims
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Hex SHA-256 of the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Runs the LSTM from a zero state over `frames` (`T x input_dim`,
    /// row-major) and the output layer on every step.
    pub fn forward(&self, frames: &[f64]) -> Result<ForwardCache> {
        let NetworkDims { input_dim: d, hidden_dim: h, output_dim: o } = self.dims;
        if frames.is_empty() || !frames.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "{} feature values is not a nonempty multiple of input_dim {d}",
                frames.len()
            )));
        }
        let steps = frames.len() / d;
        let lay = self.dims.layout();
        let p = &self.params;
        let (wx, wh, bias) = (&p[lay.wx..lay.wh], &p[lay.wh..lay.b], &p[lay.b..lay.wo]);
        let (wo, bo) = (&p[lay.wo..lay.bo], &p[lay.bo..lay.end]);

        let mut gates = vec![0.0; steps * 4 * h];
        let mut cells = vec![0.0; steps * h];
        let mut cell_tanh = vec![0.0; steps * h];
        let mut hidden = vec![0.0; steps * h];
        let mut logits = vec![0.0; steps * o];
        let mut probs = vec![0.0; steps * o];
        let zero_state = vec![0.0; h];

        for t in 0..steps {
            let x = &frames[t * d..(t + 1) * d];
            let h_prev = if t == 0 { &zero_state[..] } else { &hidden[(t - 1) * h..t * h] };
            let z = &mut gates[t * 4 * h..(t + 1) * 4 * h];
            for (r, zr) in z.iter_mut().enumerate() {
                let mut acc = bias[r];
                acc += dot(&wx[r * d..(r + 1) * d], x);
                acc += dot(&wh[r * h..(r + 1) * h], h_prev);
                *zr = acc;
            }
            for j in 0..h {
                z[j] = sigmoid(z[j]);
                z[h + j] = sigmoid(z[h + j]);
                z[2 * h + j] = z[2 * h + j].tanh();
                z[3 * h + j] = sigmoid(z[3 * h + j]);
            }
            let mut h_new = vec![0.0; h];
            let (done, rest) = cells.split_at_mut(t * h);
            let c_prev = if t == 0 { &zero_state[..] } else { &done[(t - 1) * h..] };
            for j in 0..h {
                let c = z[h + j] * c_prev[j] + z[j] * z[2 * h + j];
                let tc = c.tanh();
                rest[j] = c;
                cell_tanh[t * h + j] = tc;
                h_new[j] = z[3 * h + j] * tc;
            }
            hidden[t * h..(t + 1) * h].copy_from_slice(&h_new);

            let out = &mut logits[t * o..(t + 1) * o];
            for (k, ok) in out.iter_mut().enumerate() {
                *ok = bo[k] + dot(&wo[k * h..(k + 1) * h], &h_new);
            }
            softmax_into(out, &mut probs[t * o..(t + 1) * o]);
        }

        Ok(ForwardCache {
            dims: self.dims,
            fingerprint: fingerprint(&self.params),
            steps,
            inputs: frames.to_vec(),
            gates,
            cells,
            cell_tanh,
            hidden,
            logits,
            probs,
        })
    }

    /// Exact gradient of [`loss`] for the sequence that produced `cache`.
    pub fn backward(&self, cache: &ForwardCache, labels: &[u32]) -> Result<FlatGradient> {
        if cache.dims != self.dims || cache.fingerprint != fingerprint(&self.params) {
            return Err(Error::Cache("cache was produced by a different network".into()));
        }
        let NetworkDims { input_dim: d, hidden_dim: h, output_dim: o } = self.dims;
        let steps = cache.steps;
        check_labels(labels, steps, o)?;
        let lay = self.dims.layout();
        let p = &self.params;
        let (wh, wo) = (&p[lay.wh..lay.b], &p[lay.wo..lay.bo]);

        let mut grad = vec![0.0; lay.end];
        let inv_t = 1.0 / steps as f64;
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let mut dh = vec![0.0; h];

        for t in (0..steps).rev() {
            let h_t = &cache.hidden[t * h..(t + 1) * h];
            // Output layer.
            dh.copy_from_slice(&dh_next);
            for k in 0..o {
                let mut dl = cache.probs[t * o + k];
                if k == labels[t] as usize {
                    dl -= 1.0;
                }
                dl *= inv_t;
                grad[lay.bo + k] += dl;
                let row = lay.wo + k * h;
                for j in 0..h {
                    grad[row + j] += dl * h_t[j];
                    dh[j] += dl * wo[k * h + j];
                }
            }
            // LSTM cell.
            let g = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                let (ig, fg, cg, og) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = cache.cell_tanh[t * h + j];
                let c_prev = if t == 0 { 0.0 } else { cache.cells[(t - 1) * h + j] };
                let dc = dh[j] * og * (1.0 - tc * tc) + dc_next[j];
                dz[j] = dc * cg * ig * (1.0 - ig);
                dz[h + j] = dc * c_prev * fg * (1.0 - fg);
                dz[2 * h + j] = dc * ig * (1.0 - cg * cg);
                dz[3 * h + j] = dh[j] * tc * og * (1.0 - og);
                dc_next[j] = dc * fg;
            }
            let x = &cache.inputs[t * d..(t + 1) * d];
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..4 * h {
                let dzr = dz[r];
                if dzr == 0.0 {
                    continue;
                }
                grad[lay.b + r] += dzr;
                let row = lay.wx + r * d;
                for i in 0..d {
                    grad[row + i] += dzr * x[i];
                }
                if t > 0 {
                    let h_prev = &cache.hidden[(t - 1) * h..t * h];
                    let row = lay.wh + r * h;
                    for j in 0..h {
                        grad[row + j] += dzr * h_prev[j];
                        dh_next[j] += dzr * wh[r * h + j];
                    }
                } else {
                    for j in 0..h {
                        dh_next[j] += dzr * wh[r * h + j];
                    }
                }
            }
        }
        Ok(FlatGradient(grad))
    }

    /// Loss and gradient of one sequence.
    pub fn loss_and_gradient(&self, frames: &[f64], labels: &[u32]) -> Result<(f64, FlatGradient)> {
        let cache = self.forward(frames)?;
        let l = loss(cache.logits(), labels, self.dims.output_dim)?;
        Ok((l, self.backward(&cache, labels)?))
    }

    pub fn sequence_loss(&self, frames: &[f64], labels: &[u32]) -> Result<f64> {
        let cache = self.forward(frames)?;
        loss(cache.logits(), labels, self.dims.output_dim)
    }

    /// `p <- p - lr * g` over the flat layout.
    pub fn apply_update(&mut self, grad: &FlatGradient, lr: f64) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries, network has {}",
                grad.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grad.as_slice()) {
            *p -= lr * g;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(NETWORK_MAGIC)?;
        for dim in [self.dims.input_dim, self.dims.hidden_dim, self.dims.output_dim] {
            let dim = u32::try_from(dim).map_err(|_| Error::Shape("dimension exceeds u32".into()))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact_or(&mut r, &mut magic, "network header")?;
        if &magic != NETWORK_MAGIC {
            return Err(Error::Format("not an FDPNET01 model file".into()));
        }
        let mut dims = [0usize; 3];
        for v in &mut dims {
            let mut b = [0u8; 4];
            read_exact_or(&mut r, &mut b, "network dims")?;
            *v = u32::from_le_bytes(b) as usize;
        }
        let dims = NetworkDims::new(dims[0], dims[1], dims[2]).map_err(|e| Error::Format(e.to_string()))?;
        let mut params = Vec::with_capacity(dims.parameter_count());
        let mut b = [0u8; 8];
        for _ in 0..dims.parameter_count() {
            read_exact_or(&mut r, &mut b, "network parameters")?;
            params.push(f64::from_le_bytes(b));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after network parameters".into()));
        }
        Network::from_flat(dims, params).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.params.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub(crate) fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn check_labels(labels: &[u32], steps: usize, classes: usize) -> Result<()> {
    if labels.len() != steps {
        return Err(Error::Shape(format!("{} labels for {steps} frames", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Label { label: bad, num_classes: classes });
    }
    Ok(())
}

/// Mean over frames of softmax cross-entropy. `logits` is `T x num_classes`.
pub fn loss(logits: &[f64], labels: &[u32], num_classes: usize) -> Result<f64> {
    if num_classes == 0 || !logits.len().is_multiple_of(num_classes) {
        return Err(Error::Shape("logits are not a multiple of the class count".into()));
    }
    let steps = logits.len() / num_classes;
    check_labels(labels, steps, num_classes)?;
    if steps == 0 {
        return Err(Error::Shape("no frames".into()));
    }
    let mut total = 0.0;
    for (row, &label) in logits.chunks_exact(num_classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - row[label as usize];
    }
    Ok(total / steps as f64)
}

/// One gradient per sequence, in input order.
pub fn per_example_gradients<'a, I>(net: &Network, batch: I) -> Result<Vec<FlatGradient>>
where
    I: IntoIterator<Item = (&'a [f64], &'a [u32])>,
{
    let grads = batch
        .into_iter()
        .map(|(frames, labels)| Ok(net.loss_and_gradient(frames, labels)?.1))
        .collect::<Result<Vec<_>>>()?;
    if grads.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(grads)
}

/// Central differences `(L(p + h) - L(p - h)) / 2h` for every parameter.
/// Two forward passes per parameter; test oracle only.
pub fn finite_difference_gradient(net: &Network, frames: &[f64], labels: &[u32], h: f64) -> Result<FlatGradient> {
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::InvalidValue(format!("finite-difference step {h} outside [1e-8, 1e-3]")));
    }
    let mut probe = net.clone();
    let mut grad = vec![0.0; net.parameter_count()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = probe.sequence_loss(frames, labels)?;
        probe.params[i] = orig - h;
        let down = probe.sequence_loss(frames, labels)?;
        probe.params[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Ok(FlatGradient(grad))
}
