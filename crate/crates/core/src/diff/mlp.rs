use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;

use super::dense::Dense;
use super::params::{Gradients, Init, ParamStore};
use crate::error::{NnnError, Result};
use crate::scalar::Scalar;

/// Residual MLP: `h = W_in x`, then `n_layers` times `h += relu(W_i h)`,
/// then an optional output projection.
#[derive(Debug, Clone)]
pub struct MlpResnet {
    pub input: Dense,
    pub blocks: Vec<Dense>,
    pub output: Option<Dense>,
    pub d_in: usize,
    pub width: usize,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    input: Array2<T>,
    /// `hidden[i]` is the input to block `i`; the last entry feeds the output layer.
    hidden: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

impl MlpResnet {
    /// `project_back` maps back to `d_in`; `output_dim` maps to that width;
    /// neither returns the raw hidden width. Setting both is rejected.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        n_layers: usize,
        width: usize,
        project_back: bool,
        output_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if project_back && output_dim.is_some() {
            return Err(NnnError::Config(
                "MLPResnet: project_back and output_dim are mutually exclusive".into(),
            ));
        }
        let input = Dense::new(store, &format!("{name}/in"), d_in, width, true, Init::Glorot, rng);
        let blocks = (0..n_layers)
            .map(|i| Dense::new(store, &format!("{name}/block{i}"), width, width, true, Init::Glorot, rng))
            .collect();
        let out_dim = if project_back { Some(d_in) } else { output_dim };
        let output = out_dim
            .map(|o| Dense::new(store, &format!("{name}/out"), width, o, true, Init::Glorot, rng));
        Ok(Self {
            input,
            blocks,
            output,
            d_in,
            width,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.output.map_or(self.width, |d| d.n_out)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView2<T>) -> Array2<T> {
        let mut h = self.input.forward(p, x);
        for b in &self.blocks {
            let pre = b.forward(p, h.view());
            Zip::from(&mut h).and(&pre).for_each(|h, &z| *h += z.max(T::zero()));
        }
        match self.output {
            Some(o) => o.forward(p, h.view()),
            None => h,
        }
    }

    pub fn forward_cached<T: Scalar>(&self, p: &ParamStore<T>, x: ArrayView2<T>) -> (Array2<T>, MlpCache<T>) {
        let mut h = self.input.forward(p, x);
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut pre_all = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let pre = b.forward(p, h.view());
            let mut next = h.clone();
            Zip::from(&mut next).and(&pre).for_each(|h, &z| *h += z.max(T::zero()));
            hidden.push(h);
            pre_all.push(pre);
            h = next;
        }
        let y = match self.output {
            Some(o) => o.forward(p, h.view()),
            None => h.clone(),
        };
        hidden.push(h);
        (
            y,
            MlpCache {
                input: x.to_owned(),
                hidden,
                pre: pre_all,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Gradients<T>,
        cache: &MlpCache<T>,
        dy: ArrayView2<T>,
        need_dx: bool,
    ) -> Option<Array2<T>> {
        let last = cache.hidden.last().expect("cache has final hidden state");
        let mut dh = match self.output {
            Some(o) => o.backward(p, g, last.view(), dy, true).unwrap(),
            None => dy.to_owned(),
        };
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let mut dpre = dh.clone();
            Zip::from(&mut dpre)
                .and(&cache.pre[i])
                .for_each(|d, &z| {
                    if z <= T::zero() {
                        *d = T::zero()
                    }
                });
            let dprev = b.backward(p, g, cache.hidden[i].view(), dpre.view(), true).unwrap();
            dh += &dprev;
        }
        self.input.backward(p, g, cache.input.view(), dh.view(), need_dx)
    }
}
