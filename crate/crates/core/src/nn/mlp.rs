use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::NnError;

/// Fully connected network with `tanh` hidden layers and a linear output.
///
/// Parameters are one flat vector. For each layer `l` with fan-in `n` and
/// fan-out `m` the layout is the weight matrix `[m][n]` row-major followed by
/// the bias `[m]`; layers follow in input-to-output order. Gradients use the
/// same layout, so optimizers and checkpoints work on plain slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_tape`]: `acts[0]` is the input and
/// `acts[l + 1]` the post-activation output of layer `l`.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape holds at least the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }
}

/// Four independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Fan-in scaled uniform initialization, zero biases. `output_scale`
    /// shrinks the last layer's weights.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], output_scale: f64, rng: &mut R) -> Result<Self, NnError> {
        Self::check_widths(widths)?;
        let mut params = Vec::with_capacity(param_count(widths));
        let layers = widths.len() - 1;
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut bound = 1.0 / (fan_in as f64).sqrt();
            if l + 1 == layers {
                bound *= output_scale;
            }
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..=bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self, NnError> {
        Self::check_widths(widths)?;
        let expected = param_count(widths);
        if params.len() != expected {
            return Err(NnError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    fn check_widths(widths: &[usize]) -> Result<(), NnError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NnError::BadWidths(widths.to_vec()));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    fn layer_slices(&self, l: usize) -> (usize, usize, usize) {
        let offset: usize = self.widths[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (offset, self.widths[l], self.widths[l + 1])
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_tape(input)?.acts.pop().expect("non-empty tape"))
    }

    pub fn forward_tape(&self, input: &[f64]) -> Result<Tape, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::InputDim {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(input.to_vec());
        let mut offset = 0;
        for l in 0..layers {
            let (n, m) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[offset..offset + n * m];
            let b = &self.params[offset + n * m..offset + n * m + m];
            offset += n * m + m;
            let x = &acts[l];
            let hidden = l + 1 < layers;
            let mut y = Vec::with_capacity(m);
            for o in 0..m {
                let row = &w[o * n..(o + 1) * n];
                let z = b[o] + dot(row, x);
                y.push(if hidden { z.tanh() } else { z });
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: l });
            }
            acts.push(y);
        }
        Ok(Tape { acts })
    }

    /// Reverse pass. Accumulates parameter gradients into `grad` (same
    /// layout as the parameters) and returns the gradient with respect to
    /// the input.
    pub fn backward(&self, tape: &Tape, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        debug_assert_eq!(d_out.len(), self.output_dim());
        let layers = self.widths.len() - 1;
        let mut delta = d_out.to_vec();
        for l in (0..layers).rev() {
            let (offset, n, m) = self.layer_slices(l);
            let w = &self.params[offset..offset + n * m];
            let x = &tape.acts[l];
            let (gw, rest) = grad[offset..offset + n * m + m].split_at_mut(n * m);
            let mut d_in = vec![0.0; n];
            for o in 0..m {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                rest[o] += d;
                let row = &w[o * n..(o + 1) * n];
                let grow = &mut gw[o * n..(o + 1) * n];
                for (g, xi) in grow.iter_mut().zip(x) {
                    *g += d * xi;
                }
                for (di, wi) in d_in.iter_mut().zip(row) {
                    *di += wi * d;
                }
            }
            if l > 0 {
                // x is the tanh output of the previous layer.
                for (di, xi) in d_in.iter_mut().zip(x) {
                    *di *= 1.0 - xi * xi;
                }
            }
            delta = d_in;
        }
        delta
    }

    /// `target ← τ·self + (1 − τ)·target`.
    pub fn soft_update_into(&self, target: &mut Mlp, tau: f64) {
        debug_assert_eq!(self.widths, target.widths);
        for (t, s) in target.params.iter_mut().zip(&self.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }

    /// Writes `<stem>.bin` (little-endian f64 parameters in layout order) and
    /// `<stem>.manifest` (text description of the shapes).
    pub fn save(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.bin")))?);
        for p in &self.params {
            bin.write_all(&p.to_le_bytes())?;
        }
        bin.flush()?;
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let mut text = String::new();
        text.push_str("format mbdp-mlp-v1\n");
        text.push_str(&format!("widths {}\n", widths.join(" ")));
        text.push_str("activation tanh-hidden linear-output\n");
        text.push_str("dtype f64-le\n");
        text.push_str(&format!("params {}\n", self.params.len()));
        for (l, w) in self.widths.windows(2).enumerate() {
            text.push_str(&format!("layer {l} weight {}x{} bias {}\n", w[1], w[0], w[1]));
        }
        std::fs::write(dir.join(format!("{stem}.manifest")), text)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, NnError> {
        let manifest = std::fs::read_to_string(dir.join(format!("{stem}.manifest")))?;
        let widths_line = manifest
            .lines()
            .find_map(|l| l.strip_prefix("widths "))
            .ok_or_else(|| NnError::Checkpoint("manifest has no widths line".into()))?;
        let widths = widths_line
            .split_whitespace()
            .map(|w| w.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| NnError::Checkpoint(format!("bad widths: {e}")))?;
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(format!("{stem}.bin")))?.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(NnError::Checkpoint("parameter file length not a multiple of 8".into()));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_params(&widths, params)
    }
}
