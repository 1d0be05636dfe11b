//! Sequential composition of layers and reverse-mode gradients through it.

use super::array::{Array, Scalar};
use super::layers::{Layer, LayerCache, LayerSpec};
use super::rng::Rng;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T: Scalar = f32> {
    layers: Vec<Layer<T>>,
}

/// Per-layer caches of one training forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T: Scalar>(Vec<LayerCache<T>>);

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn init(specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| Layer::init(s.clone(), rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec().clone()).collect()
    }

    /// Output shape for `input`, or the first layer that fails to type-check.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, l| l.spec().output_shape(&shape))
    }

    pub fn params(&self) -> Vec<&Array<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    pub fn forward(&self, x: &Array<T>) -> Result<Array<T>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?;
        }
        h.check_finite("network output")?;
        Ok(h)
    }

    pub fn forward_train(&self, x: &Array<T>) -> Result<(Array<T>, Tape<T>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, c) = l.forward_train(&h)?;
            caches.push(c);
            h = y;
        }
        h.check_finite("network output")?;
        Ok((h, Tape(caches)))
    }

    /// Backpropagates `dy` through the tape. Returns the input gradient and
    /// parameter gradients in [`Sequential::params`] order.
    pub fn backward(&self, tape: &Tape<T>, dy: &Array<T>) -> Result<(Array<T>, Vec<Array<T>>)> {
        if tape.0.len() != self.layers.len() {
            return Err(Error::invalid("tape does not belong to this network"));
        }
        let mut g = dy.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (l, c) in self.layers.iter().zip(&tape.0).rev() {
            let (dx, dp) = l.backward(c, &g)?;
            per_layer.push(dp);
            g = dx;
        }
        per_layer.reverse();
        Ok((g, per_layer.into_iter().flatten().collect()))
    }
}

/// Exact gradient of a scalar-valued network output w.r.t. its parameters.
pub fn grad<T: Scalar>(net: &Sequential<T>, input: &Array<T>) -> Result<(T, Vec<Array<T>>)> {
    let (y, tape) = net.forward_train(input)?;
    if y.len() != 1 {
        return Err(Error::shape(format!(
            "gradient requires a scalar loss, network produced {:?}",
            y.shape()
        )));
    }
    let (_, grads) = net.backward(&tape, &Array::full(y.shape(), T::one()))?;
    Ok((y.data()[0], grads))
}

/// Gradient of `loss(net(input))`; `loss` returns the value and its
/// derivative w.r.t. the network output.
pub fn grad_with_loss<T: Scalar>(
    net: &Sequential<T>,
    input: &Array<T>,
    loss: impl FnOnce(&Array<T>) -> Result<(T, Array<T>)>,
) -> Result<(T, Vec<Array<T>>)> {
    let (y, tape) = net.forward_train(input)?;
    let (value, dy) = loss(&y)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let (_, grads) = net.backward(&tape, &dy)?;
    Ok((value, grads))
}
