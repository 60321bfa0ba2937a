use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{softmax, Decoder};
use crate::nn::{Activation, ClassifierHead, Dense, DenseNet, NetGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub feature_dim: usize,
    pub margin_hidden: usize,
    pub classes: usize,
}

impl ModelShape {
    /// Width of one statistics row: center, intra variance, inter row.
    pub fn stats_width(&self) -> usize {
        self.feature_dim + 1 + self.classes
    }
}

/// Backbone feature extractor, dot-product classifier head, and the two
/// row-wise margin networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmlModel {
    pub backbone: DenseNet,
    pub head: ClassifierHead,
    pub ordinal: DenseNet,
    pub variational: DenseNet,
}

impl PmlModel {
    /// Glorot-initialized networks. The margin networks' output layers start
    /// at zero, so initial ordinal rows are centered on their own class and
    /// the variational margin starts at zero.
    pub fn new<R: Rng + ?Sized>(shape: &ModelShape, rng: &mut R) -> Result<Self> {
        let mut model = PmlModel::new_dense(shape, rng)?;
        for net in [&mut model.ordinal, &mut model.variational] {
            let last = net.layers().len() - 1;
            let layer = &mut net.layers_mut()[last];
            layer.weights_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        Ok(model)
    }

    /// Glorot initialization everywhere, margin output layers included.
    pub fn new_dense<R: Rng + ?Sized>(shape: &ModelShape, rng: &mut R) -> Result<Self> {
        let backbone = DenseNet::new(
            &[shape.input_dim, shape.hidden_width, shape.hidden_width, shape.feature_dim],
            &[Activation::Tanh, Activation::Tanh, Activation::Identity],
            rng,
        )?;
        let head = ClassifierHead::glorot(shape.classes, shape.feature_dim, rng);
        let width = shape.stats_width();
        let margin_net = |outputs: usize, rng: &mut R| -> Result<DenseNet> {
            DenseNet::from_layers(vec![
                Dense::glorot(width, shape.margin_hidden, Activation::Tanh, rng),
                Dense::glorot(shape.margin_hidden, outputs, Activation::Identity, rng),
            ])
        };
        let ordinal = margin_net(2, rng)?;
        let variational = margin_net(1, rng)?;
        Ok(PmlModel {
            backbone,
            head,
            ordinal,
            variational,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_width()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.output_width()
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            backbone: self.backbone.zero_grads(),
            head: vec![0.0; self.head.weights().len()],
            ordinal: self.ordinal.zero_grads(),
            variational: self.variational.zero_grads(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count()
            + self.head.weights().len()
            + self.ordinal.param_count()
            + self.variational.param_count()
    }

    /// Flattened in the order backbone, head, ordinal, variational.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.backbone.params();
        out.extend_from_slice(self.head.weights());
        out.extend(self.ordinal.params());
        out.extend(self.variational.params());
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape {
                context: "model parameters",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        let n = self.backbone.param_count();
        self.backbone.set_params(&flat[offset..offset + n])?;
        offset += n;
        let n = self.head.weights().len();
        self.head.weights_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
        let n = self.ordinal.param_count();
        self.ordinal.set_params(&flat[offset..offset + n])?;
        offset += n;
        self.variational.set_params(&flat[offset..])?;
        Ok(())
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.backbone.param_slices_mut();
        out.push(self.head.weights_mut());
        out.extend(self.ordinal.param_slices_mut());
        out.extend(self.variational.param_slices_mut());
        out
    }

    /// Plain softmax over the logits; margins play no part at inference.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let features = self.backbone.forward(x)?;
        let logits = self.head.logits(&features)?;
        if let Some(s) = logits.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("logit {s} at inference")));
        }
        Ok(softmax(&logits))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub backbone: NetGrads,
    pub head: Vec<f64>,
    pub ordinal: NetGrads,
    pub variational: NetGrads,
}

impl ModelGrads {
    pub fn scale(&mut self, factor: f64) {
        self.backbone.scale(factor);
        self.head.iter_mut().for_each(|g| *g *= factor);
        self.ordinal.scale(factor);
        self.variational.scale(factor);
    }

    /// Same order as [`PmlModel::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.backbone.flatten();
        out.extend_from_slice(&self.head);
        out.extend(self.ordinal.flatten());
        out.extend(self.variational.flatten());
        out
    }

    /// Same order as [`PmlModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.backbone.slices();
        out.push(&self.head);
        out.extend(self.ordinal.slices());
        out.extend(self.variational.slices());
        out
    }
}

/// What `train` writes to `model.json` and `eval` reads back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub model: PmlModel,
    pub decoder: Decoder,
    pub train_counts: Vec<usize>,
    pub config: String,
}

impl SavedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::State(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("malformed model file {}: {e}", path.display())))
    }
}
