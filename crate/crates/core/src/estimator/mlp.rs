//! Baseline trunk: `[h; temb] → (affine → SiLU) × depth → affine`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};

use super::layout::{Init, ParamLayout, Slot};
use super::ops::{affine, affine_backward, silu, silu_backward};

#[derive(Debug, Clone)]
pub(crate) struct MlpTrunk {
    dim: usize,
    hidden: Vec<(Slot, Slot)>,
    out_w: Slot,
    out_b: Slot,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    // input to each affine map, the last one feeds the output layer
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl MlpTrunk {
    pub fn build(
        layout: &mut ParamLayout,
        dim: usize,
        time_dim: usize,
        width: usize,
        depth: usize,
    ) -> Self {
        let mut fan_in = dim + time_dim;
        let mut hidden = Vec::with_capacity(depth);
        for i in 0..depth {
            let w = layout.matrix(
                format!("trunk.mlp{i}.weight"),
                fan_in,
                width,
                Init::FanIn(fan_in),
            );
            let b = layout.vector(format!("trunk.mlp{i}.bias"), width, Init::FanIn(fan_in));
            hidden.push((w, b));
            fan_in = width;
        }
        let out_w = layout.matrix("trunk.out.weight", width, dim, Init::FanIn(width));
        let out_b = layout.vector("trunk.out.bias", dim, Init::FanIn(width));
        Self {
            dim,
            hidden,
            out_w,
            out_b,
        }
    }

    pub fn forward(
        &self,
        p: &[f64],
        h: ArrayView1<'_, f64>,
        temb: ArrayView1<'_, f64>,
    ) -> (Array1<f64>, MlpCache) {
        let mut z = concatenate(Axis(0), &[h, temb])
            .expect("1-d concat")
            .insert_axis(Axis(0));
        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut pre = Vec::with_capacity(self.hidden.len());
        for &(w, b) in &self.hidden {
            let a = affine(p, w, Some(b), z.view());
            let next = silu(&a);
            inputs.push(z);
            pre.push(a);
            z = next;
        }
        let out = affine(p, self.out_w, Some(self.out_b), z.view());
        inputs.push(z);
        (out.index_axis_move(Axis(0), 0), MlpCache { inputs, pre })
    }

    /// Returns the gradient with respect to `h`.
    pub fn backward(
        &self,
        p: &[f64],
        cache: &MlpCache,
        d_out: ArrayView1<'_, f64>,
        grads: &mut [f64],
    ) -> Array1<f64> {
        let last = cache.inputs.len() - 1;
        let dy = d_out.insert_axis(Axis(0));
        let mut dz = affine_backward(
            p,
            grads,
            self.out_w,
            Some(self.out_b),
            cache.inputs[last].view(),
            dy,
        );
        for (i, &(w, b)) in self.hidden.iter().enumerate().rev() {
            let da = silu_backward(&cache.pre[i], dz.view());
            dz = affine_backward(p, grads, w, Some(b), cache.inputs[i].view(), da.view());
        }
        dz.slice(s![0, ..self.dim]).to_owned()
    }
}
