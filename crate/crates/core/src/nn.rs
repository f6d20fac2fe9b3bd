//! Layer building blocks shared by the encoders, decoder and discriminators.

use alloc::format;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::params::{Group, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Fully connected layer `W x + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, group: Group, rng: &mut dyn RngCore) -> Self {
        Self::with_init(store, name, input, output, group, Init::Glorot, Init::Zeros, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        group: Group,
        w_init: Init,
        b_init: Init,
        rng: &mut dyn RngCore,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), [output, input, 1], group, w_init, rng);
        let b = store.add(&format!("{name}.b"), [output, 1, 1], group, b_init, rng);
        Self { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        tape.linear(store, self.w, Some(self.b), x)
    }

    pub fn forward_rows(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        tape.linear_rows(store, self.w, Some(self.b), x)
    }
}

/// Gated recurrent unit cell.
#[derive(Debug, Clone)]
pub struct GruCell {
    input_proj: Dense,
    state_proj: Dense,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, group: Group, rng: &mut dyn RngCore) -> Self {
        Self {
            input_proj: Dense::new(store, &format!("{name}.x"), input, 3 * hidden, group, rng),
            state_proj: Dense::new(store, &format!("{name}.h"), hidden, 3 * hidden, group, rng),
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Var {
        let n = self.hidden;
        let gx = self.input_proj.forward(tape, store, x);
        let gh = self.state_proj.forward(tape, store, h);
        let rz_x = tape.slice(gx, 0, 2 * n);
        let rz_h = tape.slice(gh, 0, 2 * n);
        let rz = tape.add(rz_x, rz_h);
        let rz = tape.sigmoid(rz);
        let r = tape.slice(rz, 0, n);
        let z = tape.slice(rz, n, n);
        let cx = tape.slice(gx, 2 * n, n);
        let ch = tape.slice(gh, 2 * n, n);
        let rch = tape.mul(r, ch);
        let cand = tape.add(cx, rch);
        let cand = tape.tanh(cand);
        // h' = cand + z ⊙ (h - cand)
        let diff = tape.sub(h, cand);
        let keep = tape.mul(z, diff);
        tape.add(cand, keep)
    }

    /// Runs over the rows of an `[L, input]` sequence from a zero state.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, seq: Var, reverse: bool) -> Vec<Var> {
        let len = tape.shape(seq)[0];
        let mut h = tape.vector(alloc::vec![0.0; self.hidden]);
        let mut states = Vec::with_capacity(len);
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let x = tape.row(seq, t);
            h = self.step(tape, store, x, h);
            states.push(h);
        }
        if reverse {
            states.reverse();
        }
        states
    }
}

/// Long short-term memory cell with forget-gate bias initialised to 1.
#[derive(Debug, Clone)]
pub struct LstmCell {
    gates: Dense,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, group: Group, rng: &mut dyn RngCore) -> Self {
        let gates = Dense::new(store, name, input + hidden, 4 * hidden, group, rng);
        store.values_mut(gates.b)[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Self { gates, hidden }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var, c: Var) -> (Var, Var) {
        let n = self.hidden;
        let xh = tape.concat(&[x, h]);
        let g = self.gates.forward(tape, store, xh);
        let ifo = tape.slice(g, 0, 3 * n);
        let ifo = tape.sigmoid(ifo);
        let i = tape.slice(ifo, 0, n);
        let f = tape.slice(ifo, n, n);
        let o = tape.slice(ifo, 2 * n, n);
        let cand = tape.slice(g, 3 * n, n);
        let cand = tape.tanh(cand);
        let fc = tape.mul(f, c);
        let ic = tape.mul(i, cand);
        let c2 = tape.add(fc, ic);
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc);
        (h2, c2)
    }
}

/// One 3×3 convolution followed by ELU.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

/// Stack of [`ConvLayer`]s over a single-channel `[1, T, F]` input.
#[derive(Debug, Clone)]
pub struct ConvStack {
    layers: Vec<ConvLayer>,
    channels: Vec<usize>,
}

impl ConvStack {
    /// `channels[i]` output channels for layer `i`, with `strides[i]` ∈ {1, 2}.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: &[usize],
        strides: &[usize],
        group: Group,
        rng: &mut dyn RngCore,
    ) -> Self {
        assert_eq!(channels.len(), strides.len());
        let mut cin = 1;
        let layers = channels
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&cout, &stride))| {
                let bound = libm::sqrt(6.0 / ((cin + cout) * 9) as f64);
                let w = store.add(&format!("{name}.{i}.w"), [cout, cin * 9, 1], group, Init::Uniform(bound), rng);
                let b = store.add(&format!("{name}.{i}.b"), [cout, 1, 1], group, Init::Zeros, rng);
                cin = cout;
                ConvLayer { w, b, stride }
            })
            .collect();
        Self { layers, channels: channels.to_vec() }
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&1)
    }

    /// Spatial size after the stack for an input extent `n`.
    pub fn out_extent(&self, n: usize) -> usize {
        self.layers.iter().fold(n, |n, l| (n + l.stride - 1) / l.stride)
    }

    /// Smallest input extent that is not padded beyond one stride per layer.
    pub fn min_extent(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        self.layers.iter().fold(x, |h, l| {
            let c = tape.conv2d(store, l.w, l.b, h, l.stride);
            tape.elu(c)
        })
    }
}
