//! Flat parameter storage, gradient buffers and the Adam optimizer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::tape::Shape;

/// Which network a parameter belongs to. Checkpoints store one segment per
/// group and optimizers update a [`GroupMask`] of groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    StyleEncoder,
    SpeakerEncoder,
    Decoder,
    Discriminator,
    StyleDiscriminator,
    /// Evaluation probes; never part of a model checkpoint.
    Probe,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::StyleEncoder,
        Group::SpeakerEncoder,
        Group::Decoder,
        Group::Discriminator,
        Group::StyleDiscriminator,
        Group::Probe,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::StyleEncoder => "style_encoder",
            Group::SpeakerEncoder => "speaker_encoder",
            Group::Decoder => "decoder",
            Group::Discriminator => "discriminator",
            Group::StyleDiscriminator => "style_discriminator",
            Group::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupMask(u8);

impl GroupMask {
    pub const NONE: GroupMask = GroupMask(0);
    pub const ALL: GroupMask = GroupMask(0b111111);
    /// Style encoder, speaker encoder and decoder.
    pub const GENERATOR: GroupMask = GroupMask(0b00111);
    pub const DISCRIMINATOR: GroupMask = GroupMask(0b01000);
    pub const STYLE_DISCRIMINATOR: GroupMask = GroupMask(0b10000);
    pub const PROBE: GroupMask = GroupMask(0b100000);

    pub fn of(groups: &[Group]) -> Self {
        GroupMask(groups.iter().fold(0, |m, g| m | g.bit()))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform on `[-a, a]`.
    Uniform(f64),
    /// Uniform with Glorot bound computed from the shape's fan-in/fan-out.
    Glorot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Shape,
    pub group: Group,
    pub offset: usize,
    pub len: usize,
}

/// All trainable tensors of one model, contiguous in a single buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    masks: Vec<Option<Vec<f64>>>,
    data: Vec<f64>,
}

fn uniform(rng: &mut dyn RngCore, a: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (2.0 * u - 1.0) * a
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Shape, group: Group, init: Init, rng: &mut dyn RngCore) -> ParamId {
        let len = shape[0] * shape[1] * shape[2];
        let offset = self.data.len();
        let bound = match init {
            Init::Glorot => libm::sqrt(6.0 / (shape[0] + shape[1] * shape[2]) as f64),
            Init::Uniform(a) => a,
            _ => 0.0,
        };
        for _ in 0..len {
            let v = match init {
                Init::Zeros => 0.0,
                Init::Constant(c) => c,
                Init::Uniform(_) | Init::Glorot => uniform(rng, bound),
            };
            self.data.push(v);
        }
        self.entries.push(ParamEntry { name: name.into(), shape, group, offset, len });
        self.masks.push(None);
        ParamId(self.entries.len() as u32 - 1)
    }

    /// Registers a fixed 0/1 mask applied by [`crate::tape::Tape::param_masked`].
    /// Masked-out weights are zeroed so they stay inert under any update.
    pub fn set_mask(&mut self, id: ParamId, mask: Vec<f64>) {
        let e = &self.entries[id.0 as usize];
        assert_eq!(mask.len(), e.len, "mask length");
        for (w, m) in self.data[e.offset..e.offset + e.len].iter_mut().zip(&mask) {
            *w *= m;
        }
        self.masks[id.0 as usize] = Some(mask);
    }

    pub fn mask(&self, id: ParamId) -> Option<&[f64]> {
        self.masks[id.0 as usize].as_deref()
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0 as usize];
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0 as usize];
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        self.entries[id.0 as usize].shape
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0 as usize].group
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(|i| ParamId(i as u32))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Values of every parameter in `group`, in registration order.
    pub fn group_values(&self, group: Group) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .flat_map(|e| self.data[e.offset..e.offset + e.len].iter().copied())
            .collect()
    }

    /// Inverse of [`ParamStore::group_values`]; the length must match exactly.
    pub fn set_group_values(&mut self, group: Group, values: &[f64]) -> Result<(), crate::Error> {
        let expected: usize = self.entries.iter().filter(|e| e.group == group).map(|e| e.len).sum();
        if expected != values.len() {
            return Err(crate::Error::Shape(alloc::format!(
                "group {} expects {} values, got {}",
                group.name(),
                expected,
                values.len()
            )));
        }
        let mut off = 0;
        for e in self.entries.iter().filter(|e| e.group == group) {
            self.data[e.offset..e.offset + e.len].copy_from_slice(&values[off..off + e.len]);
            off += e.len;
        }
        Ok(())
    }
}

/// Gradient buffer with the same layout as a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    entries: Vec<(usize, usize, Group)>,
    data: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            entries: store.entries.iter().map(|e| (e.offset, e.len, e.group)).collect(),
            data: vec![0.0; store.data.len()],
        }
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        let (o, l, _) = self.entries[id.0 as usize];
        &self.data[o..o + l]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        let (o, l, _) = self.entries[id.0 as usize];
        &mut self.data[o..o + l]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    fn spans(&self, mask: GroupMask) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().filter(move |e| mask.contains(e.2)).map(|e| (e.0, e.1))
    }

    /// Global L2 norm over the groups in `mask`.
    pub fn norm(&self, mask: GroupMask) -> f64 {
        let s: f64 = self.spans(mask).map(|(o, l)| self.data[o..o + l].iter().map(|v| v * v).sum::<f64>()).sum();
        libm::sqrt(s)
    }

    /// Rescales the masked groups so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip(&mut self, mask: GroupMask, max_norm: f64) -> f64 {
        let norm = self.norm(mask);
        if norm > max_norm {
            let k = max_norm / norm;
            let spans: Vec<_> = self.spans(mask).collect();
            for (o, l) in spans {
                self.data[o..o + l].iter_mut().for_each(|v| *v *= k);
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Adam over the parameters of a [`GroupMask`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; store.len()], v: vec![0.0; store.len()] }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, mask: GroupMask) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for (o, l) in grads.spans(mask) {
            for i in o..o + l {
                let g = grads.data[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i] / c1;
                let vhat = self.v[i] / c2;
                store.data[i] -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;

    #[test]
    fn group_values_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add("a", [2, 2, 1], Group::Decoder, Init::Glorot, &mut rng);
        s.add("b", [3, 1, 1], Group::Discriminator, Init::Uniform(1.0), &mut rng);
        s.add("c", [1, 1, 1], Group::Decoder, Init::Constant(2.0), &mut rng);
        let dec = s.group_values(Group::Decoder);
        assert_eq!(dec.len(), 5);
        assert_eq!(dec[4], 2.0);
        let mut t = s.clone();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        t.set_group_values(Group::Decoder, &dec).unwrap();
        assert_eq!(t.group_values(Group::Decoder), dec);
        assert!(t.set_group_values(Group::Decoder, &dec[..4]).is_err());
    }

    #[test]
    fn clip_caps_norm_and_respects_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let a = s.add("a", [2, 1, 1], Group::Decoder, Init::Zeros, &mut rng);
        let b = s.add("b", [1, 1, 1], Group::Discriminator, Init::Zeros, &mut rng);
        let mut g = Gradients::zeros_like(&s);
        g.values_mut(a).copy_from_slice(&[3.0, 4.0]);
        g.values_mut(b)[0] = 10.0;
        let before = g.clip(GroupMask::GENERATOR, 1.0);
        assert_eq!(before, 5.0);
        assert!((g.norm(GroupMask::GENERATOR) - 1.0).abs() < 1e-12);
        assert_eq!(g.values(b)[0], 10.0);
    }

    #[test]
    fn adam_only_touches_masked_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let a = s.add("a", [1, 1, 1], Group::Decoder, Init::Constant(1.0), &mut rng);
        let b = s.add("b", [1, 1, 1], Group::Discriminator, Init::Constant(1.0), &mut rng);
        let mut g = Gradients::zeros_like(&s);
        g.values_mut(a)[0] = 2.0;
        g.values_mut(b)[0] = 2.0;
        let mut opt = Adam::new(&s, 0.1);
        opt.update(&mut s, &g, GroupMask::GENERATOR);
        // first Adam step moves by lr in the direction of -sign(g)
        assert!((s.values(a)[0] - 0.9).abs() < 1e-6);
        assert_eq!(s.values(b)[0], 1.0);
    }
}
