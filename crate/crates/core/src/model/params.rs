//! Structured access to a checkpoint's tensors, shared by the forward and
//! backward passes. `Params<&[T]>` borrows a checkpoint; `Params<Vec<T>>`
//! holds gradients.

use std::collections::BTreeMap;

use crate::arch::{attn, ln, mlp, ToyArchSpec};
use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub(crate) struct BlockParams<S> {
    pub ln1_g: S,
    pub ln1_b: S,
    pub wq: S,
    pub wk: S,
    pub wv: S,
    pub wo: S,
    pub ln2_g: S,
    pub ln2_b: S,
    pub w1: S,
    pub b1: S,
    pub w2: S,
    pub b2: S,
}

#[derive(Debug, Clone)]
pub(crate) struct Params<S> {
    pub embed: S,
    pub blocks: Vec<BlockParams<S>>,
    pub lnf_g: S,
    pub lnf_b: S,
    pub head_w: S,
    pub head_b: S,
}

impl<S> BlockParams<S> {
    fn named(&self, i: usize) -> [(String, &S); 12] {
        [
            (ln(i, "attn", "g"), &self.ln1_g),
            (ln(i, "attn", "b"), &self.ln1_b),
            (attn(i, "wq"), &self.wq),
            (attn(i, "wk"), &self.wk),
            (attn(i, "wv"), &self.wv),
            (attn(i, "wo"), &self.wo),
            (ln(i, "mlp", "g"), &self.ln2_g),
            (ln(i, "mlp", "b"), &self.ln2_b),
            (mlp(i, "w1"), &self.w1),
            (mlp(i, "b1"), &self.b1),
            (mlp(i, "w2"), &self.w2),
            (mlp(i, "b2"), &self.b2),
        ]
    }

    fn each_mut(&mut self) -> [&mut S; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn build(i: usize, mut get: impl FnMut(&str) -> S) -> Self {
        Self {
            ln1_g: get(&ln(i, "attn", "g")),
            ln1_b: get(&ln(i, "attn", "b")),
            wq: get(&attn(i, "wq")),
            wk: get(&attn(i, "wk")),
            wv: get(&attn(i, "wv")),
            wo: get(&attn(i, "wo")),
            ln2_g: get(&ln(i, "mlp", "g")),
            ln2_b: get(&ln(i, "mlp", "b")),
            w1: get(&mlp(i, "w1")),
            b1: get(&mlp(i, "b1")),
            w2: get(&mlp(i, "w2")),
            b2: get(&mlp(i, "b2")),
        }
    }
}

impl<S> Params<S> {
    fn build(arch: &ToyArchSpec, mut get: impl FnMut(&str) -> S) -> Self {
        Self {
            embed: get("embed.w"),
            blocks: (0..arch.n_layers)
                .map(|i| BlockParams::build(i, &mut get))
                .collect(),
            lnf_g: get("ln.final.g"),
            lnf_b: get("ln.final.b"),
            head_w: get("head.w"),
            head_b: get("head.b"),
        }
    }

    pub fn named(&self) -> Vec<(String, &S)> {
        let mut out = vec![
            ("embed.w".to_string(), &self.embed),
            ("ln.final.g".to_string(), &self.lnf_g),
            ("ln.final.b".to_string(), &self.lnf_b),
            ("head.w".to_string(), &self.head_w),
            ("head.b".to_string(), &self.head_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(i));
        }
        out
    }

    fn each_mut(&mut self) -> Vec<&mut S> {
        let mut out = vec![
            &mut self.embed,
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.head_w,
            &mut self.head_b,
        ];
        for b in &mut self.blocks {
            out.extend(b.each_mut());
        }
        out
    }
}

impl<'a, T: Scalar> Params<&'a [T]> {
    pub fn view(ckpt: &'a Checkpoint<T>) -> Self {
        Self::build(ckpt.arch(), |n| ckpt.get(n).data())
    }
}

impl<T: Scalar> Params<Vec<T>> {
    pub fn zeros(arch: &ToyArchSpec) -> Self {
        let shapes: BTreeMap<String, Vec<usize>> = arch.tensor_shapes().into_iter().collect();
        Self::build(arch, |n| vec![T::zero(); shapes[n].iter().product()])
    }

    pub fn add_assign(&mut self, other: &Self) {
        let theirs: Vec<&Vec<T>> = other.named().into_iter().map(|(_, v)| v).collect();
        for (mine, theirs) in self.each_mut().into_iter().zip(theirs) {
            for (a, &b) in mine.iter_mut().zip(theirs) {
                *a = *a + b;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in self.each_mut() {
            for a in v.iter_mut() {
                *a = *a * s;
            }
        }
    }

    pub fn into_checkpoint(self, arch: &ToyArchSpec, provenance: &str) -> Result<Checkpoint<T>> {
        let shapes: BTreeMap<String, Vec<usize>> = arch.tensor_shapes().into_iter().collect();
        let tensors = self
            .named()
            .into_iter()
            .map(|(n, v)| Ok((n.clone(), Tensor::new(shapes[&n].clone(), v.clone())?)))
            .collect::<Result<_>>()?;
        Checkpoint::new(*arch, tensors, provenance)
    }
}
