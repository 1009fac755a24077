//! Low-rank adapters on the expert up and down projections: `W_eff = W + B·A`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{MoELayer, MoEModel};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRAAdapter {
    /// r × in
    pub a: Matrix,
    /// out × r
    pub b: Matrix,
}

impl LoRAAdapter {
    /// `B = 0`, `A` Gaussian with std `1/√in`.
    pub fn init<R: Rng + ?Sized>(out: usize, inp: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > out.min(inp) {
            return Err(Error::InvalidArgument(format!(
                "LoRA rank {rank} must be in 1..={}",
                out.min(inp)
            )));
        }
        Ok(Self {
            a: Matrix::randn(rank, inp, 1.0 / (inp as f64).sqrt(), rng),
            b: Matrix::zeros(out, rank),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    pub fn delta(&self) -> Result<Matrix> {
        self.b.matmul(&self.a)
    }

    /// `W + B·A`; `w` is not modified.
    pub fn apply(&self, w: &Matrix) -> Result<Matrix> {
        if (w.rows, w.cols) != (self.b.rows, self.a.cols) {
            return Err(shape_err(
                "LoRA target",
                format!("{}x{}", self.b.rows, self.a.cols),
                format!("{}x{}", w.rows, w.cols),
            ));
        }
        w.add(&self.delta()?)
    }

    /// Adapter gradients from the gradient of the effective weight:
    /// `dA = Bᵀ dW`, `dB = dW Aᵀ`.
    pub fn grads(&self, dw: &Matrix) -> Result<LoRAAdapter> {
        Ok(LoRAAdapter {
            a: self.b.transpose().matmul(dw)?,
            b: dw.matmul(&self.a.transpose())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAdapters {
    pub up: LoRAAdapter,
    pub down: LoRAAdapter,
}

/// Effective weights of one layer with adapters applied to every expert.
pub fn apply_lora(layer: &MoELayer, adapters: &[ExpertAdapters]) -> Result<MoELayer> {
    if adapters.len() != layer.experts.len() {
        return Err(shape_err("apply_lora adapters", layer.experts.len(), adapters.len()));
    }
    let mut out = layer.clone();
    for (e, ad) in out.experts.iter_mut().zip(adapters) {
        e.up = ad.up.apply(&e.up)?;
        e.down = ad.down.apply(&e.down)?;
    }
    Ok(out)
}

/// Adapters for every expert of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSet {
    pub layers: Vec<Vec<ExpertAdapters>>,
}

impl LoraSet {
    pub fn init<R: Rng + ?Sized>(model: &MoEModel, rank: usize, rng: &mut R) -> Result<Self> {
        let (d, f) = (model.config.hidden, model.config.ffn);
        let mut layers = Vec::with_capacity(model.layers.len());
        for layer in &model.layers {
            let mut ads = Vec::with_capacity(layer.experts.len());
            for _ in &layer.experts {
                ads.push(ExpertAdapters {
                    up: LoRAAdapter::init(f, d, rank, rng)?,
                    down: LoRAAdapter::init(d, f, rank, rng)?,
                });
            }
            layers.push(ads);
        }
        Ok(Self { layers })
    }

    pub fn merged(&self, model: &MoEModel) -> Result<MoEModel> {
        if self.layers.len() != model.layers.len() {
            return Err(shape_err("LoraSet layers", model.layers.len(), self.layers.len()));
        }
        let mut out = model.clone();
        for (layer, ads) in out.layers.iter_mut().zip(&self.layers) {
            *layer = apply_lora(layer, ads)?;
        }
        Ok(out)
    }

    /// Adapter gradients from model-shaped gradients of the merged weights.
    pub fn grads(&self, dmodel: &MoEModel) -> Result<LoraSet> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (ads, gl) in self.layers.iter().zip(&dmodel.layers) {
            let mut row = Vec::with_capacity(ads.len());
            for (ad, ge) in ads.iter().zip(&gl.experts) {
                row.push(ExpertAdapters {
                    up: ad.up.grads(&ge.up)?,
                    down: ad.down.grads(&ge.down)?,
                });
            }
            layers.push(row);
        }
        Ok(LoraSet { layers })
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|e| [&e.up.a, &e.up.b, &e.down.a, &e.down.b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|e| [&mut e.up.a, &mut e.up.b, &mut e.down.a, &mut e.down.b])
            .collect()
    }
}
