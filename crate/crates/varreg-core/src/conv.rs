//! Small d-dimensional convolutional networks over grid-attached fields.
//!
//! Kernels have 3-sample support per spatial axis, clamp-to-edge padding,
//! and rectified hidden activations. Both the forward pass and the exact
//! reverse-mode backward pass are implemented here; the denoising layer
//! and the unrolled network build on these primitives.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::grid::{GridDesc, VectorField};
use crate::rng::SeededRng;
use crate::{Error, Result};

/// A multi-channel field on a grid; channel count is independent of rank.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiField {
    grid: GridDesc,
    chans: Vec<Vec<f64>>,
}

impl MultiField {
    pub fn zeros(grid: GridDesc, nch: usize) -> Self {
        let n = grid.len();
        Self { grid, chans: vec![vec![0.0; n]; nch] }
    }

    pub fn from_channels(grid: GridDesc, chans: Vec<Vec<f64>>) -> Result<Self> {
        for c in &chans {
            if c.len() != grid.len() {
                return Err(Error::ShapeMismatch("channel length != grid size".into()));
            }
        }
        Ok(Self { grid, chans })
    }

    pub fn from_vector_field(v: &VectorField) -> Self {
        Self { grid: v.grid().clone(), chans: v.components().to_vec() }
    }

    pub fn into_vector_field(self) -> Result<VectorField> {
        VectorField::new(self.grid, self.chans)
    }

    pub fn grid(&self) -> &GridDesc {
        &self.grid
    }

    pub fn num_channels(&self) -> usize {
        self.chans.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.chans[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.chans[c]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.chans
    }
}

/// One convolution layer: `out_ch x in_ch` kernels of 3^rank taps plus a
/// bias per output channel. Weight layout is [out][in][tap], the tap index
/// running over the 3^rank spatial offsets with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub rank: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(rank: usize, in_ch: usize, out_ch: usize) -> Self {
        let taps = 3usize.pow(rank as u32);
        Self {
            rank,
            in_ch,
            out_ch,
            weights: vec![0.0; out_ch * in_ch * taps],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn taps(&self) -> usize {
        3usize.pow(self.rank as u32)
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.out_ch * self.in_ch * self.taps()
            || self.bias.len() != self.out_ch
        {
            return Err(Error::ShapeMismatch(format!(
                "conv layer {}->{} weight/bias sizes",
                self.in_ch, self.out_ch
            )));
        }
        Ok(())
    }
}

/// Clamped flat indices of the 3^rank neighborhood around each sample.
fn neighbor_table(grid: &GridDesc) -> Vec<usize> {
    let rank = grid.rank();
    let taps = 3usize.pow(rank as u32);
    let dims = grid.dims();
    let [d0, d1, d2] = grid.padded_dims();
    let mut table = Vec::with_capacity(grid.len() * taps);
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let idx = [i0 as i64, i1 as i64, i2 as i64];
                for t in 0..taps {
                    let mut rem = t;
                    let mut nb = [0usize; 3];
                    // decode offsets with the last axis fastest
                    for a in (0..rank).rev() {
                        let o = (rem % 3) as i64 - 1;
                        rem /= 3;
                        nb[a] = (idx[a] + o).max(0).min(dims[a] as i64 - 1) as usize;
                    }
                    table.push(grid.offset(nb));
                }
            }
        }
    }
    table
}

fn conv_apply(layer: &ConvLayer, input: &MultiField, table: &[usize]) -> MultiField {
    let grid = input.grid().clone();
    let n = grid.len();
    let taps = layer.taps();
    let mut out = MultiField::zeros(grid, layer.out_ch);
    for o in 0..layer.out_ch {
        let plane = out.channel_mut(o);
        for x in 0..n {
            let nb = &table[x * taps..(x + 1) * taps];
            let mut acc = layer.bias[o];
            for i in 0..layer.in_ch {
                let w = &layer.weights[(o * layer.in_ch + i) * taps..];
                let ch = input.channel(i);
                for t in 0..taps {
                    acc += w[t] * ch[nb[t]];
                }
            }
            plane[x] = acc;
        }
    }
    out
}

/// Adjoint of `conv_apply`: cotangents for the input, weights, and bias.
fn conv_backward(
    layer: &ConvLayer,
    input: &MultiField,
    g_out: &MultiField,
    table: &[usize],
) -> (MultiField, Vec<f64>, Vec<f64>) {
    let grid = input.grid().clone();
    let n = grid.len();
    let taps = layer.taps();
    let mut g_in = MultiField::zeros(grid, layer.in_ch);
    let mut g_w = vec![0.0; layer.weights.len()];
    let mut g_b = vec![0.0; layer.bias.len()];
    for o in 0..layer.out_ch {
        let go = g_out.channel(o);
        for x in 0..n {
            let g = go[x];
            if g == 0.0 {
                continue;
            }
            g_b[o] += g;
            let nb = &table[x * taps..(x + 1) * taps];
            for i in 0..layer.in_ch {
                let wbase = (o * layer.in_ch + i) * taps;
                let ch = input.channel(i);
                let gch = g_in.channel_mut(i);
                for t in 0..taps {
                    g_w[wbase + t] += g * ch[nb[t]];
                    gch[nb[t]] += g * layer.weights[wbase + t];
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

/// A stack of convolution layers with rectified hidden activations and an
/// identity output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub layers: Vec<ConvLayer>,
}

impl ConvNet {
    /// The default shallow architecture: in -> hidden -> hidden -> out.
    pub fn shallow(rank: usize, in_ch: usize, hidden: usize, out_ch: usize) -> Self {
        Self {
            layers: vec![
                ConvLayer::zeros(rank, in_ch, hidden),
                ConvLayer::zeros(rank, hidden, hidden),
                ConvLayer::zeros(rank, hidden, out_ch),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("conv net has no layers".into()));
        }
        for (a, b) in self.layers.iter().zip(self.layers.iter().skip(1)) {
            if a.out_ch != b.in_ch {
                return Err(Error::ShapeMismatch(format!(
                    "channel chain broken: {} -> {}",
                    a.out_ch, b.in_ch
                )));
            }
        }
        for l in &self.layers {
            l.validate()?;
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().unwrap().out_ch
    }

    /// Seeded He-style initialization of all kernels; biases stay zero.
    pub fn init_random(&mut self, rng: &mut SeededRng, scale: f64) {
        for l in &mut self.layers {
            let fan_in = (l.in_ch * l.taps()) as f64;
            let std = scale * libm::sqrt(2.0 / fan_in);
            for w in &mut l.weights {
                *w = rng.normal() * std;
            }
        }
    }

    pub fn forward(&self, input: &MultiField) -> Result<MultiField> {
        Ok(self.forward_traced(input)?.0)
    }

    /// Forward pass that records everything the backward pass needs: the
    /// input of each layer and each pre-activation.
    pub fn forward_traced(&self, input: &MultiField) -> Result<(MultiField, NetTrace)> {
        self.validate()?;
        if input.num_channels() != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "net expects {} input channels, got {}",
                self.in_channels(),
                input.num_channels()
            )));
        }
        let table = neighbor_table(input.grid());
        let nl = self.layers.len();
        let mut layer_inputs = Vec::with_capacity(nl);
        let mut preacts = Vec::with_capacity(nl);
        let mut x = input.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let z = conv_apply(layer, &x, &table);
            layer_inputs.push(x);
            if li + 1 < nl {
                let mut act = z.clone();
                for c in 0..act.num_channels() {
                    for v in act.channel_mut(c) {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                preacts.push(z);
                x = act;
            } else {
                preacts.push(z.clone());
                x = z;
            }
        }
        Ok((x, NetTrace { layer_inputs, preacts }))
    }

    /// Reverse-mode pass over a recorded forward trace.
    pub fn backward(&self, trace: &NetTrace, g_out: &MultiField) -> (MultiField, ConvNetGrad) {
        let table = neighbor_table(g_out.grid());
        let nl = self.layers.len();
        let mut grads = vec![(Vec::new(), Vec::new()); nl];
        let mut g = g_out.clone();
        for li in (0..nl).rev() {
            if li + 1 < nl {
                // gate through the rectifier of this layer's output
                let z = &trace.preacts[li];
                for c in 0..g.num_channels() {
                    let zc = z.channel(c);
                    let gc = g.channel_mut(c);
                    for (gv, &zv) in gc.iter_mut().zip(zc) {
                        if zv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
            }
            let (g_in, g_w, g_b) =
                conv_backward(&self.layers[li], &trace.layer_inputs[li], &g, &table);
            grads[li] = (g_w, g_b);
            g = g_in;
        }
        (g, ConvNetGrad { layers: grads })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Reads parameters back in `append_params` order; returns how many
    /// values were consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&src[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&src[k..k + nb]);
            k += nb;
        }
        k
    }
}

/// Recorded intermediates of one net application.
#[derive(Debug, Clone)]
pub struct NetTrace {
    layer_inputs: Vec<MultiField>,
    preacts: Vec<MultiField>,
}

/// Per-layer weight and bias cotangents, parallel to the net's layers.
#[derive(Debug, Clone)]
pub struct ConvNetGrad {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ConvNetGrad {
    pub fn zeros_like(net: &ConvNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ConvNetGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.0.iter_mut().zip(&b.0) {
                *x += y;
            }
            for (x, y) in a.1.iter_mut().zip(&b.1) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.0.iter_mut().for_each(|x| *x *= s);
            l.1.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn append_to(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.0);
            out.extend_from_slice(&l.1);
        }
    }
}
