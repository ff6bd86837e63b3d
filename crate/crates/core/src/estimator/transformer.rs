//! Staged-transformer trunk.
//!
//! The fused `L`-vector is cut into `S` tokens of `L/S` values, each projected
//! to the model width and given a learned position embedding. Every block is
//! pre-norm: adaptive RMS-norm → multi-head self-attention → residual, then
//! adaptive RMS-norm → SiLU MLP (4× width) → residual. Adaptive RMS-norm
//! normalizes each token and applies a per-channel scale and shift that are
//! affine functions of the timestep embedding. A final adaptive norm and
//! projection map tokens back to `L/S` values, which are flattened to `L`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::layout::{Init, ParamLayout, Slot};
use super::ops::{
    affine, affine_backward, linear_backward, rms_norm, rms_norm_backward, silu, silu_backward,
    softmax_rows, softmax_rows_backward,
};

pub(crate) const MLP_RATIO: usize = 4;
const POS_INIT: f64 = 0.02;

/// Timestep-conditioned scale and shift.
#[derive(Debug, Clone, Copy)]
struct Modulation {
    scale_w: Slot,
    scale_b: Slot,
    shift_w: Slot,
    shift_b: Slot,
}

impl Modulation {
    fn build(layout: &mut ParamLayout, prefix: &str, time_dim: usize, width: usize) -> Self {
        Self {
            scale_w: layout.matrix(
                format!("{prefix}.scale.weight"),
                time_dim,
                width,
                Init::Zeros,
            ),
            scale_b: layout.vector(format!("{prefix}.scale.bias"), width, Init::Ones),
            shift_w: layout.matrix(
                format!("{prefix}.shift.weight"),
                time_dim,
                width,
                Init::Zeros,
            ),
            shift_b: layout.vector(format!("{prefix}.shift.bias"), width, Init::Zeros),
        }
    }

    fn eval(&self, p: &[f64], temb: ArrayView1<'_, f64>) -> (Array1<f64>, Array1<f64>) {
        let scale = temb.dot(&self.scale_w.mat(p)) + self.scale_b.vec(p);
        let shift = temb.dot(&self.shift_w.mat(p)) + self.shift_b.vec(p);
        (scale, shift)
    }

    fn apply(u: &Array2<f64>, scale: &Array1<f64>, shift: &Array1<f64>) -> Array2<f64> {
        u * scale + shift
    }

    /// Returns the gradient with respect to the normalized input `u`.
    fn backward(
        &self,
        grads: &mut [f64],
        temb: ArrayView1<'_, f64>,
        u: &Array2<f64>,
        scale: &Array1<f64>,
        da: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let d_scale = (&da * u).sum_axis(Axis(0));
        let d_shift = da.sum_axis(Axis(0));
        let col = temb.insert_axis(Axis(1));
        self.scale_w
            .mat_mut(grads)
            .scaled_add(1.0, &(&col * &d_scale.view().insert_axis(Axis(0))));
        let mut g = self.scale_b.vec_mut(grads);
        g += &d_scale;
        self.shift_w
            .mat_mut(grads)
            .scaled_add(1.0, &(&col * &d_shift.view().insert_axis(Axis(0))));
        let mut g = self.shift_b.vec_mut(grads);
        g += &d_shift;
        &da * scale
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: Modulation,
    wq: Slot,
    wk: Slot,
    wv: Slot,
    wo: Slot,
    bo: Slot,
    norm2: Modulation,
    fc1_w: Slot,
    fc1_b: Slot,
    fc2_w: Slot,
    fc2_b: Slot,
}

#[derive(Debug, Clone)]
struct BlockCache {
    u1: Array2<f64>,
    inv1: Array1<f64>,
    scale1: Array1<f64>,
    a1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    u2: Array2<f64>,
    inv2: Array1<f64>,
    scale2: Array1<f64>,
    a2: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct TransformerTrunk {
    tokens: usize,
    token_dim: usize,
    width: usize,
    heads: usize,
    in_w: Slot,
    in_b: Slot,
    pos: Slot,
    blocks: Vec<Block>,
    final_norm: Modulation,
    out_w: Slot,
    out_b: Slot,
}

#[derive(Debug, Clone)]
pub(crate) struct TransformerCache {
    tokens_in: Array2<f64>,
    blocks: Vec<BlockCache>,
    uf: Array2<f64>,
    invf: Array1<f64>,
    scalef: Array1<f64>,
    af: Array2<f64>,
}

impl TransformerTrunk {
    pub fn build(
        layout: &mut ParamLayout,
        dim: usize,
        time_dim: usize,
        width: usize,
        depth: usize,
        heads: usize,
        tokens: usize,
    ) -> Self {
        let token_dim = dim / tokens;
        let hidden = MLP_RATIO * width;
        let in_w = layout.matrix("trunk.in.weight", token_dim, width, Init::FanIn(token_dim));
        let in_b = layout.vector("trunk.in.bias", width, Init::FanIn(token_dim));
        let pos = layout.matrix("trunk.pos", tokens, width, Init::Uniform(POS_INIT));
        let blocks = (0..depth)
            .map(|b| {
                let pre = format!("trunk.block{b}");
                Block {
                    norm1: Modulation::build(layout, &format!("{pre}.norm1"), time_dim, width),
                    wq: layout.matrix(format!("{pre}.attn.q"), width, width, Init::FanIn(width)),
                    wk: layout.matrix(format!("{pre}.attn.k"), width, width, Init::FanIn(width)),
                    wv: layout.matrix(format!("{pre}.attn.v"), width, width, Init::FanIn(width)),
                    wo: layout.matrix(
                        format!("{pre}.attn.out.weight"),
                        width,
                        width,
                        Init::FanIn(width),
                    ),
                    bo: layout.vector(format!("{pre}.attn.out.bias"), width, Init::FanIn(width)),
                    norm2: Modulation::build(layout, &format!("{pre}.norm2"), time_dim, width),
                    fc1_w: layout.matrix(
                        format!("{pre}.mlp.fc1.weight"),
                        width,
                        hidden,
                        Init::FanIn(width),
                    ),
                    fc1_b: layout.vector(format!("{pre}.mlp.fc1.bias"), hidden, Init::FanIn(width)),
                    fc2_w: layout.matrix(
                        format!("{pre}.mlp.fc2.weight"),
                        hidden,
                        width,
                        Init::FanIn(hidden),
                    ),
                    fc2_b: layout.vector(format!("{pre}.mlp.fc2.bias"), width, Init::FanIn(hidden)),
                }
            })
            .collect();
        let final_norm = Modulation::build(layout, "trunk.final", time_dim, width);
        let out_w = layout.matrix("trunk.out.weight", width, token_dim, Init::FanIn(width));
        let out_b = layout.vector("trunk.out.bias", token_dim, Init::FanIn(width));
        Self {
            tokens,
            token_dim,
            width,
            heads,
            in_w,
            in_b,
            pos,
            blocks,
            final_norm,
            out_w,
            out_b,
        }
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn forward(
        &self,
        p: &[f64],
        h: ArrayView1<'_, f64>,
        temb: ArrayView1<'_, f64>,
    ) -> (Array1<f64>, TransformerCache) {
        let tokens_in = h
            .to_owned()
            .into_shape_with_order((self.tokens, self.token_dim))
            .expect("token reshape");
        let mut x = affine(p, self.in_w, Some(self.in_b), tokens_in.view()) + self.pos.mat(p);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (u1, inv1) = rms_norm(&x);
            let (scale1, shift1) = blk.norm1.eval(p, temb);
            let a1 = Modulation::apply(&u1, &scale1, &shift1);
            let q = affine(p, blk.wq, None, a1.view());
            let k = affine(p, blk.wk, None, a1.view());
            let v = affine(p, blk.wv, None, a1.view());
            let mut o = Array2::zeros((self.tokens, self.width));
            let mut probs = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut scores);
                o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            x = x + affine(p, blk.wo, Some(blk.bo), o.view());

            let (u2, inv2) = rms_norm(&x);
            let (scale2, shift2) = blk.norm2.eval(p, temb);
            let a2 = Modulation::apply(&u2, &scale2, &shift2);
            let h_pre = affine(p, blk.fc1_w, Some(blk.fc1_b), a2.view());
            let h_act = silu(&h_pre);
            x = x + affine(p, blk.fc2_w, Some(blk.fc2_b), h_act.view());
            caches.push(BlockCache {
                u1,
                inv1,
                scale1,
                a1,
                q,
                k,
                v,
                probs,
                o,
                u2,
                inv2,
                scale2,
                a2,
                h_pre,
                h_act,
            });
        }
        let (uf, invf) = rms_norm(&x);
        let (scalef, shiftf) = self.final_norm.eval(p, temb);
        let af = Modulation::apply(&uf, &scalef, &shiftf);
        let y = affine(p, self.out_w, Some(self.out_b), af.view());
        let out = y
            .into_shape_with_order(self.tokens * self.token_dim)
            .expect("flatten");
        (
            out,
            TransformerCache {
                tokens_in,
                blocks: caches,
                uf,
                invf,
                scalef,
                af,
            },
        )
    }

    /// Returns the gradient with respect to the fused input `h`.
    pub fn backward(
        &self,
        p: &[f64],
        temb: ArrayView1<'_, f64>,
        cache: &TransformerCache,
        d_out: ArrayView1<'_, f64>,
        grads: &mut [f64],
    ) -> Array1<f64> {
        let dy = d_out
            .to_owned()
            .into_shape_with_order((self.tokens, self.token_dim))
            .expect("token reshape");
        let daf = affine_backward(
            p,
            grads,
            self.out_w,
            Some(self.out_b),
            cache.af.view(),
            dy.view(),
        );
        let duf = self
            .final_norm
            .backward(grads, temb, &cache.uf, &cache.scalef, daf.view());
        let mut dx = rms_norm_backward(&cache.uf, &cache.invf, duf.view());

        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for (blk, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            // MLP half
            let dh_act = affine_backward(
                p,
                grads,
                blk.fc2_w,
                Some(blk.fc2_b),
                c.h_act.view(),
                dx.view(),
            );
            let dh_pre = silu_backward(&c.h_pre, dh_act.view());
            let da2 = affine_backward(
                p,
                grads,
                blk.fc1_w,
                Some(blk.fc1_b),
                c.a2.view(),
                dh_pre.view(),
            );
            let du2 = blk
                .norm2
                .backward(grads, temb, &c.u2, &c.scale2, da2.view());
            dx = dx + rms_norm_backward(&c.u2, &c.inv2, du2.view());

            // attention half
            let d_o = affine_backward(p, grads, blk.wo, Some(blk.bo), c.o.view(), dx.view());
            let mut dq = Array2::zeros(c.q.raw_dim());
            let mut dk = Array2::zeros(c.k.raw_dim());
            let mut dv = Array2::zeros(c.v.raw_dim());
            for (hd, probs) in c.probs.iter().enumerate() {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let d_oh = d_o.slice(cols);
                let d_probs = d_oh.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&d_oh));
                let d_scores = softmax_rows_backward(probs, d_probs.view()) * scale;
                dq.slice_mut(cols).assign(&d_scores.dot(&c.k.slice(cols)));
                dk.slice_mut(cols)
                    .assign(&d_scores.t().dot(&c.q.slice(cols)));
            }
            let mut da1 =
                linear_backward(c.a1.view(), blk.wq.mat(p), dq.view(), blk.wq.mat_mut(grads));
            da1 += &linear_backward(c.a1.view(), blk.wk.mat(p), dk.view(), blk.wk.mat_mut(grads));
            da1 += &linear_backward(c.a1.view(), blk.wv.mat(p), dv.view(), blk.wv.mat_mut(grads));
            let du1 = blk
                .norm1
                .backward(grads, temb, &c.u1, &c.scale1, da1.view());
            dx = dx + rms_norm_backward(&c.u1, &c.inv1, du1.view());
        }
        let mut gpos = self.pos.mat_mut(grads);
        gpos += &dx;
        let d_tokens = affine_backward(
            p,
            grads,
            self.in_w,
            Some(self.in_b),
            cache.tokens_in.view(),
            dx.view(),
        );
        d_tokens
            .into_shape_with_order(self.tokens * self.token_dim)
            .expect("flatten")
    }
}
